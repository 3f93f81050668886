use rapidnet::analysis::{composite_rf, count_macs, count_params, report, report_for_model};
use rapidnet::{build_model, default_config, ModelConfig, StageConfig};

#[test]
fn variant_totals_near_reference_figures() {
    let table = [("ti", 6.6e6, 0.6e9), ("s", 9.2e6, 0.9e9), ("m", 17.3e6, 1.6e9), ("b", 30.5e6, 3.4e9)];
    let mut prev = (0, 0);
    for (v, params, macs) in table {
        let r = report(&default_config(v).unwrap(), 224).unwrap();
        assert!((r.total_params as f64 / params - 1.0).abs() < 0.1, "{v} params {}", r.total_params);
        assert!((r.total_macs as f64 / macs - 1.0).abs() < 0.1, "{v} macs {}", r.total_macs);
        assert!(r.total_params > prev.0 && r.total_macs > prev.1);
        prev = (r.total_params, r.total_macs);
    }
}

#[test]
fn mixer_branch_trf() {
    let r = report(&default_config("ti").unwrap(), 224).unwrap();
    let a = r.layers.iter().find(|l| l.name == "stage3.dcb0.mldc.branch_a").unwrap();
    let b = r.layers.iter().find(|l| l.name == "stage3.dcb0.mldc.branch_b").unwrap();
    assert_eq!((a.k, a.d, a.trf), (3, 2, 5));
    assert_eq!((b.k, b.d, b.trf), (3, 3, 7));
}

#[test]
fn json_key_order() {
    let r = report(&default_config("micro").unwrap(), 64).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    let keys = ["\"variant\"", "\"resolution\"", "\"total_params\"", "\"total_gmacs\"", "\"composite_rf\"", "\"layers\""];
    let pos: Vec<_> = keys.iter().map(|k| json.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn ti_report_matches_counters() {
    let m = build_model::<f32>(&default_config("ti").unwrap()).unwrap();
    let r = report_for_model(&m, 224).unwrap();
    assert_eq!(r.total_params, count_params(&m));
    assert_eq!(r.total_macs, count_macs(&m, 224).unwrap());
    assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<usize>());
    assert_eq!(r.composite_rf, composite_rf(&m).unwrap());
}

#[test]
fn depthless_model_costs_only_the_fixed_layers() {
    let cfg = ModelConfig {
        stages: vec![StageConfig::new(8, 0, 0); 4],
        ..default_config("micro").unwrap()
    };
    let r = report(&cfg, 64).unwrap();
    let fixed: Vec<_> = r.layers.iter().filter(|l| !l.name.ends_with(".bn")).map(|l| l.name.as_str()).collect();
    assert_eq!(
        fixed,
        ["stem.conv1", "stem.conv2", "stage2.down", "stage3.down", "stage4.down", "head.fc"]
    );
}
