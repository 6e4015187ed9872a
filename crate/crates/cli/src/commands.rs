use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use lsgcn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use lsgcn::dataset::{load_dataset, verify_stats, Dataset, ExpectedStats, Split};
use lsgcn::model::ModelConfig;
use lsgcn::trainer::{build_cache, evaluate, resolve_config, train_with_observer, TrainConfig, TrainError};
use lsgcn::verify::run_suite;
use lsgcn::OpKind;

use crate::run_config::RunConfig;
use crate::{EvalArgs, GradcheckArgs, InspectArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

fn runtime(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    load_dataset(dir).map_err(|e| CliError::Config(format!("dataset {}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| runtime(&path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime("json", e))?;
    text.push('\n');
    write(path, text)
}

/// Everything needed to repeat a training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Vec<String>,
    pub dataset_path: PathBuf,
    pub dataset_name: String,
    pub dataset_checksums: BTreeMap<String, String>,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub model: String,
    pub seeds: Vec<u64>,
    pub test_acc: Vec<f64>,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_val_acc: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn worker_count(jobs: usize) -> usize {
    std::env::var("LSGC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
        .min(jobs)
}

fn run_seed(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    dir: &Path,
) -> Result<SeedResult, CliError> {
    let seed = train_cfg.seed;
    let classify = |e: TrainError| match e {
        TrainError::Config(m) => CliError::Config(m),
        other => CliError::Runtime(format!("seed {seed}: {other}")),
    };
    let (params, history) = train_with_observer(model, train_cfg, dataset, |r, _| {
        log::debug!("seed {seed} epoch {} loss {:.6} val {:.4}", r.epoch, r.train_loss, r.val_acc);
    })
    .map_err(classify)?;
    let cache = build_cache(&params.config, train_cfg, dataset).map_err(|e| runtime("neighborhoods", e))?;
    let eval_batch = train_cfg.eval_batch_size;
    let val_acc = evaluate(&params, dataset, cache.as_ref(), Split::Val, eval_batch).map_err(|e| runtime("eval", e))?;
    let test_acc = evaluate(&params, dataset, cache.as_ref(), Split::Test, eval_batch).map_err(|e| runtime("eval", e))?;

    fs::create_dir_all(dir).map_err(|e| runtime(&dir.display().to_string(), e))?;
    write(&dir.join("history.csv"), history.to_csv())?;
    let meta = CheckpointMeta {
        dataset: Some(dataset.name.clone()),
        train: Some(train_cfg.clone()),
        best_epoch: history.best_epoch,
    };
    save_checkpoint(dir.join("best.ckpt"), &params, &meta).map_err(|e| runtime("checkpoint", e))?;
    let result = SeedResult {
        seed,
        epochs: history.records.len(),
        best_epoch: history.best_epoch,
        val_acc,
        test_acc,
    };
    write_json(&dir.join("result.json"), &result)?;
    log::info!(
        "seed {seed}: {} epochs, best epoch {:?}, val {val_acc:.4}, test {test_acc:.4}",
        result.epochs,
        result.best_epoch
    );
    Ok(result)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?.with_overrides(args.seed, args.seeds, args.max_epochs)?;
    let dataset = load(&args.dataset)?;
    let model = resolve_config(&config.model, &dataset).map_err(|e| CliError::Config(e.to_string()))?;
    if dataset.splits.val.is_empty() || dataset.splits.test.is_empty() {
        return Err(CliError::Config("dataset needs non-empty val and test splits".into()));
    }
    let checksums: BTreeMap<String, String> = fs::read(args.dataset.join("checksums.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let seeds = config.seed_list();
    let config = RunConfig { model, ..config };

    fs::create_dir_all(&args.out).map_err(|e| runtime(&args.out.display().to_string(), e))?;
    let mut outputs = vec![args.out.join("manifest.json"), args.out.join("summary.json")];
    outputs.extend(seeds.iter().map(|&s| seed_dir(&args.out, s)));
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: std::env::args().collect(),
        dataset_path: args.dataset.clone(),
        dataset_name: dataset.name.clone(),
        dataset_checksums: checksums,
        config: config.clone(),
        seeds: seeds.clone(),
        outputs,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let workers = worker_count(seeds.len());
    log::info!(
        "training {} on {} with {} seed(s), {workers} worker(s)",
        config.model.kind.name(),
        dataset.name,
        seeds.len()
    );
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedResult, CliError>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let train_cfg = TrainConfig {
                    seed: seeds[i],
                    ..config.train.clone()
                };
                let r = run_seed(&config.model, &train_cfg, &dataset, &seed_dir(&args.out, seeds[i]));
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let results = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>, _>>()?;

    let test: Vec<f64> = results.iter().map(|r| r.test_acc).collect();
    let val: Vec<f64> = results.iter().map(|r| r.val_acc).collect();
    let (mean_test_acc, std_test_acc) = mean_std(&test);
    let summary = Summary {
        dataset: dataset.name.clone(),
        model: config.model.kind.name().into(),
        seeds,
        test_acc: test,
        mean_test_acc,
        std_test_acc,
        mean_val_acc: mean_std(&val).0,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "result dataset={} model={} seeds={} mean_test_acc={:.6} std_test_acc={:.6}",
        summary.dataset,
        summary.model,
        summary.seeds.len(),
        summary.mean_test_acc,
        summary.std_test_acc
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let dataset = load(&args.dataset)?;
    let c = &ckpt.params.config;
    let have = (dataset.num_nodes(), dataset.num_features(), dataset.num_classes);
    let want = (c.num_nodes, c.input_dim, c.num_classes);
    if have != want {
        return Err(CliError::Config(format!(
            "dimension mismatch: checkpoint expects (nodes, features, classes) = {want:?}, dataset has {have:?}"
        )));
    }
    let train_cfg = ckpt.meta.train.clone().unwrap_or_else(|| TrainConfig::new(1.0));
    let cache = build_cache(c, &train_cfg, &dataset).map_err(|e| runtime("neighborhoods", e))?;
    for &split in &args.splits {
        let nodes = dataset.splits.get(split).len();
        if nodes == 0 {
            return Err(CliError::Config(format!("split {} is empty", split.name())));
        }
        let acc = evaluate(&ckpt.params, &dataset, cache.as_ref(), split, train_cfg.eval_batch_size)
            .map_err(|e| runtime("eval", e))?;
        println!("split={} accuracy={acc:.6} nodes={nodes}", split.name());
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let fault = match &args.fault {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| CliError::Config(format!("unknown op {name:?}")))?,
        ),
    };
    let results = run_suite(args.eps, fault).map_err(|e| CliError::Config(e.to_string()))?;
    for r in &results {
        println!(
            "gradcheck {} max_rel_error={:.3e} {}",
            r.name,
            r.max_rel_error,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    println!("gradcheck overall {}", if failed.is_empty() { "PASS" } else { "FAIL" });
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn expectations(arg: Option<&str>, dataset: &Dataset) -> Result<Option<ExpectedStats>, CliError> {
    match arg {
        None => Ok(ExpectedStats::citation(&dataset.name)),
        Some(name) => {
            if let Some(e) = ExpectedStats::citation(name) {
                return Ok(Some(e));
            }
            let text = fs::read_to_string(name)
                .map_err(|e| CliError::Config(format!("--expect {name}: {e}")))?;
            serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| CliError::Config(format!("--expect {name}: {e}")))
        }
    }
}

pub fn inspect(args: &InspectArgs) -> Result<(), CliError> {
    let dataset = load(&args.dataset)?;
    let expected = expectations(args.expect.as_deref(), &dataset)?;
    println!("dataset {}", dataset.name);
    let report = verify_stats(&dataset, expected.as_ref().unwrap_or(&ExpectedStats::default()));
    let actual = ExpectedStats::of(&dataset);
    let fields = [
        ("nodes", actual.nodes),
        ("edges", actual.edges),
        ("features", actual.features),
        ("classes", actual.classes),
        ("train", actual.train),
        ("val", actual.val),
        ("test", actual.test),
    ];
    for (field, value) in fields {
        let value = value.unwrap_or(0);
        match report.checks.iter().find(|c| c.field == field) {
            Some(c) if c.pass => println!("{field} {value} expected {} PASS", c.expected),
            Some(c) => println!(
                "{field} {value} expected {} FAIL delta {:+}",
                c.expected,
                value as i64 - c.expected as i64
            ),
            None => println!("{field} {value}"),
        }
    }
    println!("feature_nnz {}", dataset.feature_nnz());
    let per_class: Vec<String> = dataset.train_class_counts().iter().map(|c| c.to_string()).collect();
    println!("train_per_class {}", per_class.join(","));
    if expected.is_some() {
        println!("verify {}", if report.all_pass() { "PASS" } else { "FAIL" });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[0.8, 0.82, 0.84]);
        assert!((m - 0.82).abs() < 1e-12);
        assert!((s - 0.02).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::Runtime(String::new()).exit_code(), 2);
        assert_eq!(CliError::Verification(String::new()).exit_code(), 3);
    }
}
