use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn sft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sft")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sft(args);
    assert!(out.status.success(), "sft {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, value: &Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

fn tiny_spec() -> Value {
    json!({
        "modalities": [
            {"name": "a", "tokens": 8, "input_dim": 3, "window": 2, "redundancy": 2, "components": [0]},
            {"name": "b", "tokens": 6, "input_dim": 2, "window": 2, "redundancy": 1, "components": [1]}
        ],
        "num_classes": 3,
        "num_components": 2,
        "samples_per_class": 6,
        "noise": 0.2
    })
}

fn tiny_train_config() -> Value {
    json!({
        "model": {"dim": 8, "heads": 2, "unimodal_layers": 1, "cross_layers": 1, "keep": [2, 2], "mlp_ratio": 2},
        "lr": 0.003,
        "batch_size": 4,
        "epochs": 2,
        "seeds": [0],
        "mixup": {"warmup_epochs": 1}
    })
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let config = dir.path().join("config.json");
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");
    write(&spec, &tiny_spec());
    write(&config, &tiny_train_config());

    let msg = ok(&["gen-data", "--spec", spec.to_str().unwrap(), "--seed", "3", "--out", data.to_str().unwrap()]);
    assert!(msg.contains("18 samples"), "{msg}");
    assert!(data.join("manifest.json").exists());

    ok(&["train", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", runs.to_str().unwrap(), "--seeds", "0,1"]);
    for seed in [0, 1] {
        assert!(runs.join(format!("model-seed{seed}.sftm")).exists());
    }
    let csv = fs::read_to_string(runs.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,factor,seed,epoch,top1,map,gflops"));
    assert_eq!(lines.count(), 4, "one row per epoch and seed");
    let summary: Value = serde_json::from_str(&fs::read_to_string(runs.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "sft");
    assert_eq!(summary["seeds"], json!([0, 1]));

    let ckpt = runs.join("model-seed0.sftm");
    let first = ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--split", "test"]);
    let second = ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--split", "test"]);
    assert_eq!(first, second);
    let metrics: Value = serde_json::from_str(&first).unwrap();
    for key in ["loss", "top1", "map"] {
        assert!(metrics[key].is_f64(), "missing {key} in {first}");
    }
    let top1 = metrics["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    // The summary's test metrics come from the same checkpoint.
    assert_eq!(summary["test"][0]["top1"].as_f64().unwrap(), top1);
}

#[test]
fn sweep_writes_rows_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let config = dir.path().join("config.json");
    let data = dir.path().join("data");
    let out = dir.path().join("sweep");
    write(&spec, &tiny_spec());
    let mut cfg = tiny_train_config();
    cfg["epochs"] = json!(1);
    write(&config, &cfg);
    ok(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    ok(&[
        "sweep", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--factors", "1,4", "--variants", "sft,unimodal", "--seeds", "1",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    // sft at two factors, plus one unimodal model per modality at two factors
    assert_eq!(variants, ["sft", "sft", "unimodal-a", "unimodal-b", "unimodal-a", "unimodal-b"]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 6);
}

#[test]
fn cost_reports_reduction_against_first_variant() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("model.json");
    write(
        &config,
        &json!({
            "modalities": [
                {"name": "rgb", "input_dim": 1024, "tokens": 38},
                {"name": "flow", "input_dim": 1024, "tokens": 38},
                {"name": "audio", "input_dim": 128, "tokens": 1200}
            ],
            "keep": [12, 12, 20],
            "num_classes": 100
        }),
    );
    let text = ok(&["cost", "--config", config.to_str().unwrap(), "--variants", "concat,sft", "--json"]);
    let rows: Value = serde_json::from_str(&text).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows[0]["reduction"].as_f64().unwrap(), 1.0);
    let concat = rows[0]["flops"].as_u64().unwrap() as f64;
    let sft = rows[1]["flops"].as_u64().unwrap() as f64;
    assert!(sft < concat);
    assert!((rows[1]["reduction"].as_f64().unwrap() - concat / sft).abs() < 1e-9);

    let table = ok(&["cost", "--config", config.to_str().unwrap()]);
    assert!(table.lines().next().unwrap().starts_with("variant"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    write(&config, &json!({"modalities": [{"name": "a", "input_dim": 2, "tokens": 4}], "dim": 10, "heads": 3}));
    let out = sft(&["cost", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = sft(&["cost", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert!(!out.status.success());

    let out = sft(&["eval", "--checkpoint", config.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());

    let out = sft(&["cost", "--config", config.to_str().unwrap(), "--variants", "nope"]);
    assert!(!out.status.success());
}
