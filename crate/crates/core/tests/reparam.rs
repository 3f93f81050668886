use rapidnet::analysis::count_macs;
use rapidnet::blocks::{mldc_forward, CpeForm, MixerSpec, MldcBlock};
use rapidnet::reparam::reparameterize_model;
use rapidnet::verify::jitter_params;
use rapidnet::{build_model, default_config, Error, NormMode, Parameterized, RapidNetModel, Rng, Tensor};

fn jittered<T: rapidnet::Scalar>(variant: &str, seed: u64) -> RapidNetModel<T> {
    let mut m = build_model::<T>(&default_config(variant).unwrap()).unwrap();
    jitter_params(&mut m, &mut Rng::new(seed));
    m
}

#[test]
fn micro_f64_fusion_is_exact() {
    let m = jittered::<f64>("micro", 1);
    let (fused, report) = reparameterize_model(&m).unwrap();
    assert_eq!(report.fused_skips, 2);
    assert_eq!(report.folded_bns, m.bn_count());
    assert!(report.max_abs_logit_diff < 1e-8, "{report:?}");
    let x = Tensor::randn(&[2, 3, 64, 64], &mut Rng::new(2), 0.0, 1.0).unwrap();
    let d = m.forward(&x).unwrap().max_abs_diff(&fused.forward(&x).unwrap()).unwrap();
    assert!(d < 1e-8);
}

#[test]
fn fused_model_is_bn_free_and_smaller() {
    let m = jittered::<f32>("micro", 3);
    let (fused, _) = reparameterize_model(&m).unwrap();
    assert_eq!(fused.bn_count(), 0);
    assert!(fused.tensor_count() < m.tensor_count());
    assert!(fused.config.fused);
    let mut names = Vec::new();
    fused.visit_params("", &mut |n, _, _| names.push(n.to_string()));
    assert!(names.iter().all(|n| !n.contains(".bn.")));
    for r in [64, 128] {
        assert_eq!(count_macs(&m, r).unwrap(), count_macs(&fused, r).unwrap());
    }
}

#[test]
fn reparameterizing_twice_is_a_no_op() {
    let m = jittered::<f32>("micro", 4);
    let (once, _) = reparameterize_model(&m).unwrap();
    let (twice, report) = reparameterize_model(&once).unwrap();
    assert_eq!((report.fused_skips, report.folded_bns), (0, 0));
    assert_eq!(report.max_abs_logit_diff, 0.0);
    assert_eq!(once, twice);
}

#[test]
fn train_mode_model_is_rejected() {
    let mut m = jittered::<f32>("micro", 5);
    m.set_mode(NormMode::Train);
    assert!(matches!(reparameterize_model(&m), Err(Error::InvalidState(_))));
}

#[test]
fn input_model_is_untouched() {
    let m = jittered::<f32>("micro", 6);
    let copy = m.clone();
    reparameterize_model(&m).unwrap();
    assert_eq!(m, copy);
}

#[test]
fn mldc_block_forms_agree_after_fusion() {
    let mut rng = Rng::new(7);
    let mut block = MldcBlock::<f32>::new(16, &MixerSpec::default(), &mut rng).unwrap();
    jitter_params(&mut block, &mut rng);
    let x = Tensor::randn(&[1, 16, 14, 14], &mut rng, 0.0, 1.0).unwrap();
    let train = mldc_forward(&x, &block, CpeForm::Train).unwrap();
    let fused = mldc_forward(&x, &block, CpeForm::Fused).unwrap();
    assert!(train.max_abs_diff(&fused).unwrap() < 1e-4);
}
