use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsgcn::dataset::{save_dataset, synthetic, SyntheticSpec};
use serde_json::Value;
use tempfile::TempDir;

fn lsgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsgcn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny3")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_nodes: 90,
            val: 20,
            test: 30,
            ..SyntheticSpec::default()
        };
        let ds = synthetic(&spec, 3);
        save_dataset(&ds, dir.path().join("data")).unwrap();
        fs::write(
            dir.path().join("run.json"),
            r#"{
  "model": {"transformed_dim": 5, "code_dim": 2, "kernels": 3, "receptive_field": 1, "subnet_hidden": [4, 4]},
  "train": {"learning_rate": 0.01, "max_epochs": 4, "patience": 4, "seed": 5},
  "seeds": 2
}"#,
        )
        .unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, config, out) = (self.path("data"), self.path("run.json"), self.path(out));
        let mut args = vec!["train", "--dataset", p(&data), "--config", p(&config), "--out", p(&out)];
        args.extend_from_slice(extra);
        lsgcn(&args)
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_writes_manifest_summary_and_per_seed_outputs() {
    let ws = Workspace::new();
    let out = ws.train("runs", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout(&out);
    assert!(line.starts_with("result dataset=synthetic-3 model=lsgcn seeds=2 mean_test_acc="), "{line}");

    let runs = ws.path("runs");
    let manifest = read_json(&runs.join("manifest.json"));
    assert_eq!(manifest["seeds"], serde_json::json!([5, 6]));
    assert_eq!(manifest["dataset_name"], "synthetic-3");
    assert!(manifest["dataset_checksums"]["edges.csv"].is_string());
    for seed in [5, 6] {
        let dir = runs.join(format!("seed-{seed}"));
        for file in ["history.csv", "best.ckpt", "result.json"] {
            assert!(dir.join(file).is_file(), "{seed}/{file}");
        }
        let history = fs::read_to_string(dir.join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), 5, "{history}");
    }
    let summary = read_json(&runs.join("summary.json"));
    assert_eq!(summary["test_acc"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_config_fails_before_writing_anything() {
    let ws = Workspace::new();
    let (data, out) = (ws.path("data"), ws.path("runs"));
    let res = lsgcn(&["train", "--dataset", p(&data), "--config", "/no/such/config.json", "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn zero_epochs_still_produces_a_summary() {
    let ws = Workspace::new();
    let out = ws.train("zero", &["--max-epochs", "0", "--seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&ws.path("zero/summary.json"));
    assert_eq!(summary["seeds"], serde_json::json!([5]));
    assert!(ws.path("zero/seed-5/best.ckpt").is_file());
}

#[test]
fn eval_reproduces_the_training_summary() {
    let ws = Workspace::new();
    assert!(ws.train("runs", &["--seeds", "1"]).status.success());
    let summary = read_json(&ws.path("runs/summary.json"));
    let test_acc = summary["test_acc"][0].as_f64().unwrap();
    let (data, ckpt) = (ws.path("data"), ws.path("runs/seed-5/best.ckpt"));
    let out = lsgcn(&["eval", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--split", "val,test"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("split=val accuracy="));
    assert_eq!(lines[1], format!("split=test accuracy={test_acc:.6} nodes=30"));
}

#[test]
fn eval_rejects_a_checkpoint_from_another_dataset() {
    let ws = Workspace::new();
    assert!(ws.train("runs", &["--seeds", "1", "--max-epochs", "1"]).status.success());
    let ckpt = ws.path("runs/seed-5/best.ckpt");
    let out = lsgcn(&["eval", "--dataset", p(&fixture()), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_rule() {
    let out = lsgcn(&["gradcheck"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("gradcheck lsgc_layer ") && l.ends_with("PASS")));
    assert_eq!(text.lines().last(), Some("gradcheck overall PASS"));

    let out = lsgcn(&["gradcheck", "--fault", "grouped_matmul"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).lines().any(|l| l.starts_with("gradcheck grouped_matmul ") && l.ends_with("FAIL")));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grouped_matmul"));
}

#[test]
fn coarse_step_still_gives_bounded_errors() {
    let out = lsgcn(&["gradcheck", "--eps", "1e-3"]);
    let text = stdout(&out);
    for line in text.lines().filter(|l| l.contains("max_rel_error=")) {
        let value = line.split("max_rel_error=").nth(1).unwrap().split(' ').next().unwrap();
        let err: f64 = value.parse().unwrap();
        assert!(err.is_finite() && err < 1e-2, "{line}");
    }
}

#[test]
fn inspect_reports_the_fixture() {
    let out = lsgcn(&["inspect", "--dataset", p(&fixture())]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("nodes 3\n"));
    assert!(text.contains("edges 2\n"));
    assert!(text.contains("feature_nnz 5\n"));
    assert!(text.contains("train_per_class 1,0\n"));
}

#[test]
fn inspect_flags_mismatched_expectations() {
    let dir = tempfile::tempdir().unwrap();
    let expect = dir.path().join("expect.json");
    fs::write(&expect, r#"{"nodes": 3, "edges": 3, "classes": 2}"#).unwrap();
    let out = lsgcn(&["inspect", "--dataset", p(&fixture()), "--expect", p(&expect)]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("nodes 3 expected 3 PASS\n"));
    assert!(text.contains("edges 2 expected 3 FAIL delta -1\n"));
    assert!(text.contains("verify FAIL\n"));
}

#[test]
fn inspect_of_a_missing_directory_is_a_usage_error() {
    let out = lsgcn(&["inspect", "--dataset", "/no/such/dataset"]);
    assert_eq!(out.status.code(), Some(1));
}
