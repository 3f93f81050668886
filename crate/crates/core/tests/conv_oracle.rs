use proptest::prelude::*;
use rapidnet::ops::{conv2d, conv2d_naive, expand_dilated_kernel, Conv2dLayer, ConvGeometry};
use rapidnet::verify::{conv_oracle_checks, relative_error};
use rapidnet::{Rng, Tensor};

fn case() -> impl Strategy<Value = (usize, usize, usize, bool, usize, usize, usize, usize, u64)> {
    (
        prop::sample::select(vec![1usize, 3, 5, 7]),
        1usize..=3,
        1usize..=2,
        any::<bool>(),
        1usize..=4,
        0usize..=4,
        0usize..=9,
        0usize..=9,
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn optimized_matches_naive((k, d, s, depthwise, c, p, dh, dw, seed) in case()) {
        let k_eff = (k - 1) * d + 1;
        let min = k_eff.saturating_sub(2 * p).max(1);
        let (h, w) = (min + dh, min + dw);
        let groups = if depthwise { c } else { 1 };
        let cout = if depthwise { c } else { c + 1 };
        let mut rng = Rng::new(seed);
        let geo = ConvGeometry { stride: s, padding: p, dilation: d, groups };
        let layer = Conv2dLayer::<f64>::he_init(c, cout, k, geo, seed % 2 == 0, &mut rng).unwrap();
        let x = Tensor::randn(&[2, c, h, w], &mut rng, 0.0, 1.0).unwrap();
        let fast = conv2d(&x, &layer).unwrap();
        let slow = conv2d_naive(&x, &layer).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(relative_error(fast.data(), slow.data()) < 1e-5);
    }

    #[test]
    fn dilation_equals_zero_inserted_kernel((k, d, seed) in (prop::sample::select(vec![3usize, 5]), 1usize..=3, any::<u64>())) {
        let mut rng = Rng::new(seed);
        let layer = Conv2dLayer::<f64>::he_init(2, 3, k, ConvGeometry::same(k, d, 1), false, &mut rng).unwrap();
        let k_eff = (k - 1) * d + 1;
        let dense = Conv2dLayer::new(
            expand_dilated_kernel(layer.weight(), d).unwrap(),
            None,
            ConvGeometry::same(k_eff, 1, 1),
        ).unwrap();
        let x = Tensor::randn(&[1, 2, 9, 9], &mut rng, 0.0, 1.0).unwrap();
        let a = conv2d(&x, &layer).unwrap();
        let b = conv2d(&x, &dense).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}

#[test]
fn seeded_sweep_of_two_hundred_configs() {
    let checks = conv_oracle_checks(200, 42).unwrap();
    assert_eq!(checks.len(), 200);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn f32_optimized_matches_naive() {
    let mut rng = Rng::new(9);
    let layer = Conv2dLayer::<f32>::he_init(8, 8, 7, ConvGeometry::same(7, 1, 8), true, &mut rng).unwrap();
    let x = Tensor::randn(&[2, 8, 14, 14], &mut rng, 0.0, 1.0).unwrap();
    let a = conv2d(&x, &layer).unwrap();
    let b = conv2d_naive(&x, &layer).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
}
