//! Adam training with in-graph mini-batches and early stopping.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::dataset::{Dataset, Split};
use crate::graph::{plan_epoch, GraphError, NeighborCap, NeighborhoodCache};
use crate::model::{forward, Dropout, ModelConfig, ModelKind, ModelParams};
use crate::tensor::{argmax_rows, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, {}: {source}", stage(batch))]
    Diverged {
        epoch: usize,
        /// Index of the batch within the epoch; `None` during evaluation.
        batch: Option<usize>,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn stage(batch: &Option<usize>) -> String {
    match batch {
        Some(b) => format!("batch {b}"),
        None => "validation".into(),
    }
}

fn default_batch_size() -> usize {
    8
}
fn default_max_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    100
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_eval_batch_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Maximum neighborhood size; larger neighborhoods are subsampled.
    #[serde(default)]
    pub neighbor_cap: Option<usize>,
    /// Seed of the neighborhood subsampling; the training seed when absent.
    #[serde(default)]
    pub cap_seed: Option<u64>,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            weight_decay: 0.0,
            neighbor_cap: None,
            cap_seed: None,
            eval_batch_size: default_eval_batch_size(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch_size and eval_batch_size must be at least 1".into());
        }
        if self.neighbor_cap == Some(0) {
            return fail("neighbor_cap must be at least 1".into());
        }
        Ok(())
    }

    pub fn cap(&self) -> Option<NeighborCap> {
        self.neighbor_cap.map(|cap| NeighborCap {
            cap,
            seed: self.cap_seed.unwrap_or(self.seed),
        })
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Precondition(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::NonFinite { op: "adam_step" });
        }
    }

    state.t += 1;
    let AdamHyper {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
    } = *hyper;
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] + wd * *theta;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Test accuracy of the best-validation snapshot so far.
    pub test_acc_at_best: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub test_acc_at_best: f64,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_acc,test_acc_at_best,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.val_acc, r.test_acc_at_best, r.wall_ms
            ));
        }
        out
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.best_epoch == other.best_epoch
            && self.best_val.to_bits() == other.best_val.to_bits()
            && self.test_acc_at_best.to_bits() == other.test_acc_at_best.to_bits()
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_acc.to_bits() == b.val_acc.to_bits()
                    && a.test_acc_at_best.to_bits() == b.test_acc_at_best.to_bits()
            })
    }
}

/// Resolves `config` against the dataset dimensions.
pub fn resolve_config(config: &ModelConfig, dataset: &Dataset) -> Result<ModelConfig, TensorError> {
    let mut c = config.clone();
    c.resolve(dataset.num_nodes(), dataset.num_features(), dataset.num_classes)?;
    Ok(c)
}

/// Neighborhood cache for `config`, or `None` for graph-free models.
pub fn build_cache(
    config: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
) -> Result<Option<NeighborhoodCache>, GraphError> {
    match config.kind {
        ModelKind::Mlp => Ok(None),
        ModelKind::Lsgcn => {
            NeighborhoodCache::build(&dataset.graph, config.receptive_field, train.cap()).map(Some)
        }
    }
}

/// Predicted class per node, evaluated `eval_batch` centers at a time.
pub fn predict(
    params: &ModelParams,
    dataset: &Dataset,
    cache: Option<&NeighborhoodCache>,
    nodes: &[usize],
    eval_batch: usize,
) -> Result<Vec<usize>, TensorError> {
    let mut out = Vec::with_capacity(nodes.len());
    for chunk in nodes.chunks(eval_batch.max(1)) {
        let tape = Tape::new();
        let vars = params.bind(&tape, false)?;
        let logits = forward(params, &vars, &dataset.features, cache, chunk, None)?;
        out.extend(argmax_rows(&logits.value()));
    }
    Ok(out)
}

/// Fraction of `split` nodes whose prediction matches the label.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    cache: Option<&NeighborhoodCache>,
    split: Split,
    eval_batch: usize,
) -> Result<f64, TensorError> {
    accuracy(params, dataset, cache, dataset.splits.get(split), eval_batch)
}

pub fn accuracy(
    params: &ModelParams,
    dataset: &Dataset,
    cache: Option<&NeighborhoodCache>,
    nodes: &[usize],
    eval_batch: usize,
) -> Result<f64, TensorError> {
    if nodes.is_empty() {
        return Err(TensorError::EmptyReduction { op: "accuracy" });
    }
    let pred = predict(params, dataset, cache, nodes, eval_batch)?;
    let correct = pred
        .iter()
        .zip(nodes)
        .filter(|(p, &n)| **p == dataset.labels[n])
        .count();
    Ok(correct as f64 / nodes.len() as f64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn diverged(source: TensorError, epoch: usize, batch: Option<usize>) -> TrainError {
    match source {
        TensorError::NonFinite { .. } => TrainError::Diverged { epoch, batch, source },
        other => TrainError::Tensor(other),
    }
}

/// Trains from a fresh initialisation seeded by `train.seed`.
pub fn train(
    config: &ModelConfig,
    train: &TrainConfig,
    dataset: &Dataset,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_with_observer(config, train, dataset, |_, _| {})
}

/// [`train`], calling `observe` with each epoch's record and the current
/// (not best) parameters.
pub fn train_with_observer(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    mut observe: impl FnMut(&EpochRecord, &ModelParams),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_cfg.validate()?;
    let config = resolve_config(config, dataset)?;
    let params = ModelParams::init(&config, train_cfg.seed)?;
    let cache = build_cache(&config, train_cfg, dataset)?;
    train_from(params, cache.as_ref(), train_cfg, dataset, &mut observe)
}

/// Trains `params` in place of a fresh initialisation.
pub fn train_from(
    mut params: ModelParams,
    cache: Option<&NeighborhoodCache>,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
    observe: &mut dyn FnMut(&EpochRecord, &ModelParams),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_cfg.validate()?;
    if dataset.splits.train.is_empty() {
        return Err(GraphError::EmptyTrainSet.into());
    }
    let mut history = TrainHistory::default();
    if train_cfg.max_epochs == 0 {
        return Ok((params, history));
    }
    if dataset.splits.val.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }

    let hyper = train_cfg.adam();
    let mut adam = AdamState::new(params.tensors());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    dropout_rng.set_stream(1);
    let mut best = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut since_best = 0;
    let eval_batch = train_cfg.eval_batch_size;

    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let plan = plan_epoch(&dataset.splits.train, train_cfg.batch_size, epoch_seed(train_cfg.seed, epoch))?;
        let mut loss_sum = 0.0;
        for (b, batch) in plan.batches.iter().enumerate() {
            let mut step = || -> Result<(f64, Vec<Tensor>), TensorError> {
                let tape = Tape::new();
                let vars = params.bind(&tape, true)?;
                let mut dropout = Dropout {
                    rate: params.config.dropout,
                    rng: &mut dropout_rng,
                };
                let logits = forward(&params, &vars, &dataset.features, cache, batch, Some(&mut dropout))?;
                let loss = logits.softmax_cross_entropy(&dataset.labels_of(batch))?;
                loss.backward()?;
                let grads = vars
                    .flat()
                    .iter()
                    .map(|v| v.grad().expect("parameter gradient"))
                    .collect();
                let value = loss.value().item();
                Ok((value, grads))
            };
            let (loss, grads) = step().map_err(|e| diverged(e, epoch, Some(b)))?;
            adam_step(&mut params.tensors_mut(), &grads, &mut adam, &hyper)
                .map_err(|e| diverged(e, epoch, Some(b)))?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / dataset.splits.train.len() as f64;

        let val_acc =
            evaluate(&params, dataset, cache, Split::Val, eval_batch).map_err(|e| diverged(e, epoch, None))?;
        if val_acc > best_val {
            best_val = val_acc;
            best = params.clone();
            since_best = 0;
            history.best_epoch = Some(epoch);
            history.test_acc_at_best = if dataset.splits.test.is_empty() {
                f64::NAN
            } else {
                evaluate(&params, dataset, cache, Split::Test, eval_batch)?
            };
        } else {
            since_best += 1;
        }
        history.best_val = best_val;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_acc,
            test_acc_at_best: history.test_acc_at_best,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        log::debug!(
            "epoch {epoch} loss {train_loss:.6} val {val_acc:.4} test@best {:.4}",
            record.test_acc_at_best
        );
        observe(&record, &params);
        history.records.push(record);
        if since_best >= train_cfg.patience {
            break;
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            learning_rate: lr,
            ..AdamHyper::default()
        }
    }

    #[test]
    fn first_step_matches_the_closed_form() {
        let mut theta = Tensor::scalar(1.0);
        let mut state = AdamState::new([&theta]);
        adam_step(&mut [&mut theta], &[Tensor::scalar(1.0)], &mut state, &hyper(0.1)).unwrap();
        // m_hat = 1, v_hat = 1 so the step is lr / (1 + eps)
        assert!((theta.item() - 0.900000001).abs() < 1e-12, "{}", theta.item());
        assert!((theta.item() - 0.9000000316).abs() < 5e-8);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut theta = Tensor::vector(vec![0.5, -2.0]);
        let before = theta.clone();
        let mut state = AdamState::new([&theta]);
        for _ in 0..5 {
            adam_step(&mut [&mut theta], &[Tensor::zeros(&[2])], &mut state, &hyper(0.1)).unwrap();
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_learning_rate() {
        let mut theta = Tensor::scalar(0.0);
        let mut state = AdamState::new([&theta]);
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut [&mut theta], &[Tensor::scalar(3.0)], &mut state, &hyper(0.01)).unwrap();
            step = last - theta.item();
            last = theta.item();
        }
        assert!((step - 0.01).abs() < 1e-9, "{step}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_any_update() {
        let mut theta = Tensor::scalar(1.0);
        let mut state = AdamState::new([&theta]);
        let err = adam_step(&mut [&mut theta], &[Tensor::scalar(f64::NAN)], &mut state, &hyper(0.1));
        assert!(matches!(err, Err(TensorError::NonFinite { .. })));
        assert_eq!(theta.item(), 1.0);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::new(0.002);
        ok.validate().unwrap();
        let bad = [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { beta1: 1.0, ..ok.clone() },
            TrainConfig { beta2: -0.1, ..ok.clone() },
            TrainConfig { patience: 10, max_epochs: 5, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { neighbor_cap: Some(0), ..ok.clone() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.002}"#).unwrap();
        assert_eq!(cfg, TrainConfig::new(0.002));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.002, "lr": 1}"#).is_err());
    }

    #[test]
    fn cap_seed_defaults_to_training_seed() {
        let cfg = TrainConfig {
            seed: 9,
            neighbor_cap: Some(4),
            ..TrainConfig::new(0.01)
        };
        assert_eq!(cfg.cap(), Some(NeighborCap { cap: 4, seed: 9 }));
    }

    #[test]
    fn epoch_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..100).map(|e| epoch_seed(7, e)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
