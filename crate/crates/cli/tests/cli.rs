use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rapidnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rapidnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build_micro(dir: &Path, name: &str) -> String {
    let out = dir.join(name);
    let o = rapidnet(&["build", "--variant", "micro", "--out", path_str(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

fn write_raw(path: &Path, n: usize) {
    let bytes: Vec<u8> = (0..n).flat_map(|i| ((i % 17) as f32 / 17.0 - 0.5).to_le_bytes()).collect();
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn build_writes_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = build_micro(dir.path(), "m.rpdn");
    assert_eq!(&std::fs::read(path).unwrap()[..4], b"RPDN");
}

#[test]
fn build_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.rpdn");
    let o = rapidnet(&[
        "build", "--variant", "micro", "--dilations", "3,4", "--mixer", "sldc", "--no-cpe", "--no-lkffn",
        "--classes", "5", "--out", path_str(&out), "--json",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["variant"], "micro");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.rpdn");
    let out = path_str(&out);
    assert_eq!(code(&rapidnet(&["build", "--variant", "xl", "--out", out])), 1);
    assert_eq!(code(&rapidnet(&["build", "--variant", "ti", "--dilations", "3,2", "--out", out])), 1);
    assert_eq!(code(&rapidnet(&["build", "--variant", "ti", "--mixer", "swirl", "--out", out])), 1);
    assert_eq!(code(&rapidnet(&["analyze", "--resolution", "100"])), 1);
    assert_eq!(code(&rapidnet(&["frobnicate"])), 1);
    assert_eq!(code(&rapidnet(&["--dtype", "f16", "analyze"])), 1);
    assert!(!Path::new(out).exists());
    assert_eq!(code(&rapidnet(&["--help"])), 0);
}

#[test]
fn analyze_ti_near_reference_macs() {
    let o = rapidnet(&["analyze", "--variant", "ti", "--resolution", "224", "--json"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    let g = v["total_gmacs"].as_f64().unwrap();
    assert!((g / 0.6 - 1.0).abs() < 0.1, "{g}");
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.find("\"variant\"").unwrap() < text.find("\"layers\"").unwrap());
}

#[test]
fn analyze_large_resolution_and_checkpoint() {
    assert_eq!(code(&rapidnet(&["analyze", "--variant", "m", "--resolution", "512"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let path = build_micro(dir.path(), "m.rpdn");
    let o = rapidnet(&["analyze", "--model", &path, "--resolution", "64", "--json"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["variant"], "micro");
}

#[test]
fn verify_micro_f64_passes() {
    let o = rapidnet(&["verify", "--variant", "micro", "--dtype", "f64", "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    let reparam = v["groups"].as_array().unwrap().iter().find(|g| g["group"] == "reparam").unwrap();
    assert!(reparam["worst_error"].as_f64().unwrap() < 1e-8);
}

#[test]
fn verify_detects_corrupted_fusion() {
    let o = rapidnet(&["verify", "--variant", "micro", "--skip-gradients", "--corrupt-fused"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn infer_shapes_errors_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_micro(dir.path(), "m.rpdn");
    let raw = dir.path().join("x.raw");
    write_raw(&raw, 2 * 3 * 64 * 64);
    let args = ["infer", "--model", &model, "--input", path_str(&raw), "--shape", "2,3,64,64", "--top-k", "3"];
    let a = rapidnet(&args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let v = stdout_json(&a);
    assert_eq!(v["shape"], serde_json::json!([2, 8]));
    assert_eq!(v["top_k"][0].as_array().unwrap().len(), 3);
    assert_eq!(a.stdout, rapidnet(&args).stdout);

    let wrong = ["infer", "--model", &model, "--input", path_str(&raw), "--shape", "1,3,64,64"];
    assert_eq!(code(&rapidnet(&wrong)), 1);
}

#[test]
fn infer_on_missing_checkpoint_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("x.raw");
    write_raw(&raw, 3 * 32 * 32);
    let missing = dir.path().join("none.rpdn");
    let o = rapidnet(&["infer", "--model", path_str(&missing), "--input", path_str(&raw), "--shape", "1,3,32,32"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn export_fused_has_no_bn() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_micro(dir.path(), "m.rpdn");
    let out = dir.path().join("f.rpdn");
    let o = rapidnet(&["export", "--model", &model, "--fused", "--out", path_str(&out), "--json"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert_eq!(v["bn_layers"], 0);
    assert_eq!(v["fused"], true);
    let bytes = std::fs::read(&out).unwrap();
    assert!(!bytes.windows(4).any(|w| w == b".bn."));
}

#[test]
fn bench_emits_macs() {
    let o = rapidnet(&["bench", "--case", "dilated3x3", "--dilation", "3", "--rounds", "3", "--iters", "1", "--trim", "1"]);
    assert_eq!(code(&o), 0);
    let v = stdout_json(&o);
    assert_eq!(v["macs"], 32 * 28 * 28 * 32 * 9);
    assert_eq!(v["round_times_ns"].as_array().unwrap().len(), 3);
    assert_eq!(code(&rapidnet(&["bench", "--case", "mldc", "--rounds", "4", "--trim", "2"])), 1);
}

#[test]
fn train_toy_csv_has_decreasing_cosine_lr() {
    let o = rapidnet(&["train-toy", "--steps", "12", "--samples", "16", "--batch-size", "8"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,lr,loss"));
    let lrs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lrs.len(), 12);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}
