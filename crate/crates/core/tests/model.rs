use std::collections::HashSet;

use rapidnet::analysis::count_params;
use rapidnet::blocks::MixerMode;
use rapidnet::model::ModelConfig;
use rapidnet::{build_model, default_config, Error, Parameterized, Rng, Tensor};

/// Learnable tensors implied by a config: conv+BN units hold a weight,
/// gamma and beta; the CPE holds a weight; fc1 and linear layers hold a
/// weight and a bias.
fn derived_tensor_count(cfg: &ModelConfig) -> usize {
    let unit = 3;
    let branches = match cfg.mixer_mode {
        MixerMode::Mldc => 2,
        _ => 1,
    };
    let cpe = usize::from(cfg.use_cpe);
    let dcb = cpe + unit + branches * unit + unit + unit + 2 + unit;
    let irb = 3 * unit;
    let head = 2 + 2 * usize::from(cfg.head_hidden.is_some());
    let (n_irb, n_dcb) = cfg.block_counts();
    2 * unit + 3 * unit + n_irb * irb + n_dcb * dcb + head
}

#[test]
fn ti_tensor_count_matches_structure() {
    let cfg = default_config("ti").unwrap();
    let m = build_model::<f32>(&cfg).unwrap();
    assert_eq!(m.iter_params().len(), derived_tensor_count(&cfg));
    assert_eq!(derived_tensor_count(&cfg), 211);
    let sldc = ModelConfig {
        mixer_mode: MixerMode::Sldc,
        use_cpe: false,
        head_hidden: None,
        ..cfg
    };
    let m = build_model::<f32>(&sldc).unwrap();
    assert_eq!(m.iter_params().len(), derived_tensor_count(&sldc));
}

#[test]
fn names_unique_and_numels_sum_to_count() {
    for v in ["ti", "s", "m", "b", "micro"] {
        let m = build_model::<f32>(&default_config(v).unwrap()).unwrap();
        let params = m.iter_params();
        let names: HashSet<_> = params.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), params.len());
        assert_eq!(params.iter().map(|(_, t)| t.numel()).sum::<usize>(), count_params(&m));
    }
}

#[test]
fn ti_block_counts() {
    let m = build_model::<f32>(&default_config("ti").unwrap()).unwrap();
    let irbs: Vec<_> = m.stages.iter().map(|s| s.irbs.len()).collect();
    let dcbs: Vec<_> = m.stages.iter().map(|s| s.dcbs.len()).collect();
    assert_eq!(irbs, [2, 2, 6, 2]);
    assert_eq!(dcbs, [0, 0, 2, 2]);
    assert!(m.stages[0].down.is_none());
    assert!(m.stages[1..].iter().all(|s| s.down.is_some()));
}

#[test]
fn naming_scheme() {
    let m = build_model::<f32>(&default_config("ti").unwrap()).unwrap();
    let names: HashSet<_> = m.iter_params().into_iter().map(|(n, _)| n).collect();
    for n in [
        "stem.conv1.weight",
        "stage1.irb0.expand.bn.gamma",
        "stage2.down.weight",
        "stage3.dcb0.mldc.cpe.weight",
        "stage3.dcb0.mldc.branch_a.weight",
        "stage3.dcb1.mldc.branch_b.bn.beta",
        "stage4.dcb1.ffn.fc1.bias",
        "head.hidden.weight",
        "head.fc.bias",
    ] {
        assert!(names.contains(n), "{n}");
    }
    let mut buffers = 0;
    m.visit_params("", &mut |n, _, kind| {
        if kind == rapidnet::ParamKind::Buffer {
            assert!(n.ends_with("running_mean") || n.ends_with("running_var"));
            buffers += 1;
        }
    });
    assert_eq!(buffers, 2 * m.bn_count());
}

#[test]
fn ti_forward_shapes() {
    let m = build_model::<f32>(&default_config("ti").unwrap()).unwrap();
    let x = Tensor::randn(&[2, 3, 224, 224], &mut Rng::new(0), 0.0, 1.0).unwrap();
    assert_eq!(m.forward(&x).unwrap().shape(), &[2, 1000]);
    let x = Tensor::randn(&[1, 3, 256, 256], &mut Rng::new(0), 0.0, 1.0).unwrap();
    assert_eq!(m.forward(&x).unwrap().shape(), &[1, 1000]);
}

#[test]
fn mixer_ablations_have_expected_geometry() {
    let base = default_config("micro").unwrap();
    let kinds = |cfg: &ModelConfig| {
        let m = build_model::<f32>(cfg).unwrap();
        m.stages
            .iter()
            .flat_map(|s| &s.dcbs)
            .map(|d| {
                d.mldc
                    .branches
                    .iter()
                    .map(|b| (b.conv.kernel_size(), b.conv.geometry().dilation))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let conv3 = ModelConfig {
        mixer_mode: MixerMode::Conv3x3,
        ..base.clone()
    };
    assert!(kinds(&conv3).iter().all(|b| b == &[(3, 1)]));
    let pw = ModelConfig {
        mixer_mode: MixerMode::Pointwise,
        ..base.clone()
    };
    assert!(kinds(&pw).iter().all(|b| b == &[(1, 1)]));
    let wide = ModelConfig {
        dilations: (3, 4),
        mixer_kernel: 5,
        ..base
    };
    assert!(kinds(&wide).iter().all(|b| b == &[(5, 3), (5, 4)]));
}

#[test]
fn stages_one_and_two_reject_dcbs() {
    let mut cfg = default_config("micro").unwrap();
    cfg.stages[1].n_dcb = 1;
    assert!(matches!(build_model::<f32>(&cfg), Err(Error::Config(_))));
}
