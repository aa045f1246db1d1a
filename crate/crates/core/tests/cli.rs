use std::path::Path;
use std::process::{Command, Output};

use caprel::analysis::{CategoryMatrix, Metric};
use caprel::model::{Metrics, PredictionRecord};

fn caprel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caprel")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = caprel(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const SMALL_MODEL: &str = r#"{
  "model": {
    "heads": "h1,h3",
    "encoder": {"layers": 1, "dim": 8, "heads": 2, "ff_dim": 16, "max_len": 64},
    "routing": {"n_hid": 3, "hidden_d": 6, "out_d": 5, "iterations": 2}
  },
  "training": {"epochs": 1, "batch_size": 8}
}"#;

fn synth_and_train(dir: &Path) {
    ok(&["synth", "--out", &path(dir, "data"), "--n-train", "30", "--n-test", "16", "--seed", "4"]);
    std::fs::write(dir.join("train.json"), SMALL_MODEL).unwrap();
    ok(&[
        "train",
        "--config",
        &path(dir, "train.json"),
        "--train",
        &path(dir, "data/train.jsonl"),
        "--out",
        &path(dir, "run"),
    ]);
}

#[test]
fn synth_depends_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (name, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        ok(&["synth", "--out", &path(d, name), "--n-train", "20", "--n-test", "5", "--seed", seed]);
    }
    let read = |name: &str| std::fs::read(d.join(name).join("train.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert!(d.join("a/synth.config.json").exists());
    assert!(d.join("a/stats.json").exists());
    assert!(!d.join("a/flips.csv").exists());
}

#[test]
fn exit_codes_separate_config_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"spec": {"n_relatons": 3}}"#).unwrap();
    assert_eq!(caprel(&["synth", "--config", &path(d, "bad.json"), "--out", &path(d, "x")]).status.code(), Some(2));
    assert_eq!(caprel(&["synth", "--out", &path(d, "x"), "--negative-ratio", "1.5"]).status.code(), Some(2));
    assert_eq!(caprel(&["synth"]).status.code(), Some(2));
    assert_eq!(caprel(&["frobnicate"]).status.code(), Some(2));
    let missing = caprel(&[
        "eval",
        "--checkpoint",
        &path(d, "nope.ckpt"),
        "--data",
        &path(d, "nope.jsonl"),
        "--out",
        &path(d, "e"),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!d.join("x").exists());
}

#[test]
fn eval_writes_parseable_metrics_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_train(d);
    ok(&[
        "eval",
        "--checkpoint",
        &path(d, "run/model.ckpt"),
        "--data",
        &path(d, "data/test.jsonl"),
        "--out",
        &path(d, "eval"),
    ]);
    let metrics: Metrics =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.n, 16);
    assert!((0.0..=1.0).contains(&metrics.micro_f1));
    let again = serde_json::to_string_pretty(&metrics).unwrap();
    assert_eq!(serde_json::from_str::<Metrics>(&again).unwrap(), metrics);
    let records: Vec<PredictionRecord> = std::fs::read_to_string(d.join("eval/predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 16);
    assert!(records.iter().all(|r| r.credits.len() == 2));
    let trace = std::fs::read_to_string(d.join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}

#[test]
fn analyze_matrices_share_a_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_and_train(d);
    ok(&[
        "analyze",
        "--checkpoint",
        &path(d, "run/model.ckpt"),
        "--data",
        &path(d, "data/test.jsonl"),
        "--out",
        &path(d, "an"),
        "--max-pairs",
        "20",
    ]);
    for metric in [Metric::Cosine, Metric::Euclidean] {
        let before = CategoryMatrix::read_csv(&d.join(format!("an/before_{metric}.csv")), metric, "before").unwrap();
        let after = CategoryMatrix::read_csv(&d.join(format!("an/after_{metric}.csv")), metric, "after").unwrap();
        // Embedding layer plus one encoder layer.
        assert_eq!(before.layers(), 2);
        assert_eq!(before.layers(), after.layers());
        assert!(d.join(format!("an/after_{metric}.ppm")).exists());
    }
    ok(&["render", "--input", &path(d, "an/before_cosine.csv"), "--out", &path(d, "b.ppm")]);
    assert_eq!(std::fs::read(d.join("b.ppm")).unwrap(), std::fs::read(d.join("an/before_cosine.ppm")).unwrap());
}

#[test]
fn mining_perfect_predictions_finds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", &path(d, "data"), "--n-train", "10", "--n-test", "12", "--seed", "4"]);
    let test = std::fs::read_to_string(d.join("data/test.jsonl")).unwrap();
    let mut lines = String::new();
    for line in test.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rel = v["relation"].as_str().unwrap().to_string();
        let rec = PredictionRecord {
            id: v["id"].as_str().unwrap().to_string(),
            gold: rel.clone(),
            pred: rel,
            logits: vec![],
            decoder_pred: None,
            credits: vec![],
        };
        lines.push_str(&serde_json::to_string(&rec).unwrap());
        lines.push('\n');
    }
    std::fs::write(d.join("pred.jsonl"), lines).unwrap();
    ok(&[
        "mine",
        "--predictions",
        &path(d, "pred.jsonl"),
        "--data",
        &path(d, "data/test.jsonl"),
        "--out",
        &path(d, "mine"),
    ]);
    assert_eq!(std::fs::read_to_string(d.join("mine/disagreements.csv")).unwrap(), "gold,pred,count\n");
    assert_eq!(std::fs::read_to_string(d.join("mine/samples.jsonl")).unwrap(), "");
}
