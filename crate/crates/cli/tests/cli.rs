use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn qvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvit")).args(args).output().expect("spawn qvit")
}

fn ok_json(args: &[&str]) -> Value {
    let out = qvit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn code(args: &[&str]) -> i32 {
    qvit(args).status.code().expect("exit code")
}

const TINY: &str = r#"{
    "model": {"image_size": 8, "patch_size": 4, "in_channels": 1, "embed_dim": 8,
              "depth": 1, "heads": 2, "mlp_dim": 16, "num_classes": 3},
    "data": {"kind": "synthetic", "seed": 3, "train_count": 48, "eval_count": 24},
    "epochs": 2, "batch_size": 16, "calibration_size": 16, "sigma": 0.5
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn deit_tiny_uniform_report() {
    let v = ok_json(&["bitops", "--arch", "deit-t", "--uniform", "4", "--budget", "4"]);
    let total = v["total"].as_f64().unwrap();
    assert!((total / 21.5e9 - 1.0).abs() < 0.02, "{total}");
    assert_eq!(v["budget"].as_f64().unwrap(), total);
    assert_eq!(v["over_budget"], Value::Bool(false));
    let small = ok_json(&["bitops", "--arch", "deit-s", "--uniform", "4"]);
    assert!((small["total"].as_f64().unwrap() / 76.4e9 - 1.0).abs() < 0.02);
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["bitops", "--arch", "deit-t", "--uniform", "4", "--frobnicate"]), 2);
    assert_eq!(code(&["bitops", "--arch", "deit-t"]), 2);
    assert_eq!(code(&["eval", "--ckpt", s(&dir.path().join("missing.qvck"))]), 3);
    let bad_cfg = write(dir.path(), "bad.json", &TINY.replacen("\"epochs\"", "\"epoch\"", 1));
    assert_eq!(code(&["pretrain", "--config", &bad_cfg, "--out", s(&dir.path().join("r"))]), 4);
    assert_eq!(code(&["bitops", "--arch", "toy", "--uniform", "9"]), 4);
    let junk = write(dir.path(), "junk.qvck", "NOPE0000000000000000");
    assert_eq!(code(&["eval", "--ckpt", &junk]), 5);
    let bad_alloc = write(dir.path(), "a.csv", "quantizer,bit\npatch_embed.x,8\n");
    assert_eq!(code(&["bitops", "--arch", "toy", "--alloc", &bad_alloc]), 4);
}

#[test]
fn pretrain_train_eval_probe_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write(root, "tiny.json", TINY);
    let float_dir: PathBuf = root.join("float");
    let pre = ok_json(&["pretrain", "--config", &cfg, "--out", s(&float_dir)]);
    let float_ck = float_dir.join("checkpoint.qvck");
    assert!(float_ck.exists() && float_dir.join("metrics.jsonl").exists());
    assert!(!float_dir.join(".lock").exists());

    let ev = ok_json(&["eval", "--ckpt", s(&float_ck)]);
    assert_eq!(ev["accuracy"], pre["eval_accuracy"]);
    assert_eq!(ev["count"], 24);
    let tr = ok_json(&["eval", "--ckpt", s(&float_ck), "--data", "train"]);
    assert_eq!(tr["count"], 48);

    let qat_dir = root.join("qat");
    let qat = ok_json(&["train", "--config", &cfg, "--init", s(&float_ck), "--out", s(&qat_dir)]);
    let qat_ck = qat_dir.join("checkpoint.qvck");
    assert!(qat_dir.join("allocation.csv").exists());
    assert_eq!(ok_json(&["eval", "--ckpt", s(&qat_ck)])["accuracy"], qat["eval_accuracy"]);

    let heads = ok_json(&["probe-heads", "--ckpt", s(&float_ck), "--layer", "0"]);
    assert_eq!(heads["drops"].as_array().unwrap().len(), 2);
    let noop = ok_json(&["probe-heads", "--ckpt", s(&float_ck), "--layer", "0", "--low-bit", "8"]);
    assert!(noop["drops"].as_array().unwrap().iter().all(|d| d.as_f64() == Some(0.0)));
    assert_eq!(code(&["probe-heads", "--ckpt", s(&float_ck), "--layer", "3"]), 4);
    let mlp = ok_json(&["probe-mlp", "--ckpt", s(&float_ck), "--reference", "eight-bit"]);
    assert_eq!(mlp["rows"].as_array().unwrap().len(), 3);

    let out = root.join("bits.csv");
    ok_json(&["report-bits", "--ckpt", s(&qat_ck), "--out", s(&out)]);
    let first = std::fs::read(&out).unwrap();
    let summary = std::fs::read_to_string(root.join("bits_summary.csv")).unwrap();
    assert!(summary.starts_with("layer,role,count,min,median,max,mean"));
    ok_json(&["report-bits", "--ckpt", s(&qat_ck), "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), first);

    let from_alloc = ok_json(&["bitops", "--arch", &write(root, "m.json", &model_json()), "--alloc", s(&out)]);
    assert_eq!(from_alloc["total"], qat["bitops"]);

    std::fs::write(float_dir.join(".lock"), "").unwrap();
    assert_eq!(code(&["pretrain", "--config", &cfg, "--out", s(&float_dir)]), 7);
}

fn model_json() -> String {
    let v: Value = serde_json::from_str(TINY).unwrap();
    v["model"].to_string()
}
