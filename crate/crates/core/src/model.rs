//! The full network: dense input transform, stacked lsgc layers, skip
//! concatenation of the transformed features and a linear classifier.
//! Also hosts the MLP baseline, which is the same network without the
//! graph branch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::graph::NeighborhoodCache;
use crate::layer::{glorot, lsgc_forward, LayerDims, LsgcParams, LsgcVars, PositionTable, RowIndex, LAYER_PARAM_NAMES};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Lsgcn,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lsgcn => "lsgcn",
            ModelKind::Mlp => "mlp",
        }
    }
}

fn one() -> usize {
    1
}

fn default_hidden() -> [usize; 2] {
    [64, 64]
}

fn default_embedding_std() -> f64 {
    0.1
}

/// Architecture hyperparameters. `input_dim`, `num_classes` and `num_nodes`
/// come from the dataset and are filled in by [`ModelConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    pub transformed_dim: usize,
    #[serde(default = "one")]
    pub transform_layers: usize,
    #[serde(default)]
    pub code_dim: usize,
    #[serde(default)]
    pub kernels: usize,
    #[serde(default)]
    pub receptive_field: usize,
    #[serde(default = "one")]
    pub num_lsgc_layers: usize,
    #[serde(default = "default_hidden")]
    pub subnet_hidden: [usize; 2],
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_embedding_std")]
    pub embedding_init_std: f64,
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub num_nodes: usize,
}

impl ModelConfig {
    /// Fills the dataset-derived sizes, rejecting conflicting explicit values.
    pub fn resolve(&mut self, num_nodes: usize, input_dim: usize, num_classes: usize) -> Result<()> {
        for (name, slot, actual) in [
            ("num_nodes", &mut self.num_nodes, num_nodes),
            ("input_dim", &mut self.input_dim, input_dim),
            ("num_classes", &mut self.num_classes, num_classes),
        ] {
            if *slot != 0 && *slot != actual {
                return Err(TensorError::Precondition(format!(
                    "model {name} is {} but the dataset has {actual}",
                    *slot
                )));
            }
            *slot = actual;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let mut counts = vec![
            ("transformed_dim", self.transformed_dim),
            ("transform_layers", self.transform_layers),
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("num_nodes", self.num_nodes),
        ];
        if self.kind == ModelKind::Lsgcn {
            counts.extend([
                ("code_dim", self.code_dim),
                ("kernels", self.kernels),
                ("receptive_field", self.receptive_field),
                ("num_lsgc_layers", self.num_lsgc_layers),
                ("subnet_hidden[0]", self.subnet_hidden[0]),
                ("subnet_hidden[1]", self.subnet_hidden[1]),
            ]);
        }
        for (name, v) in counts {
            if v == 0 {
                return Err(TensorError::Precondition(format!("model {name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::Precondition(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.embedding_init_std.is_nan() || self.embedding_init_std <= 0.0 {
            return Err(TensorError::Precondition("embedding_init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn lsgc_layers(&self) -> usize {
        match self.kind {
            ModelKind::Lsgcn => self.num_lsgc_layers,
            ModelKind::Mlp => 0,
        }
    }

    pub fn layer_dims(&self, layer: usize) -> LayerDims {
        LayerDims {
            num_nodes: self.num_nodes,
            code_dim: self.code_dim,
            kernels: self.kernels,
            receptive_field: self.receptive_field,
            in_channels: if layer == 0 { self.transformed_dim } else { self.kernels },
            hidden: self.subnet_hidden,
        }
    }

    fn classifier_inputs(&self) -> usize {
        match self.kind {
            ModelKind::Lsgcn => self.transformed_dim + self.kernels,
            ModelKind::Mlp => self.transformed_dim,
        }
    }
}

/// `y = x·weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot(&[inputs, outputs], inputs, outputs, rng),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub transform: Vec<Dense>,
    pub layers: Vec<LsgcParams>,
    pub classifier: Dense,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transform = Vec::with_capacity(config.transform_layers);
        for l in 0..config.transform_layers {
            let inputs = if l == 0 { config.input_dim } else { config.transformed_dim };
            transform.push(Dense::init(inputs, config.transformed_dim, &mut rng));
        }
        let layers = (0..config.lsgc_layers())
            .map(|l| LsgcParams::init(config.layer_dims(l), config.embedding_init_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Dense::init(config.classifier_inputs(), config.num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            transform,
            layers,
            classifier,
        })
    }

    /// Every parameter with a stable dotted name, in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.transform.iter().enumerate() {
            out.push((format!("transform.{i}.weight"), &d.weight));
            out.push((format!("transform.{i}.bias"), &d.bias));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("lsgc.{i}.{name}"), t));
            }
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.transform {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds parameters from tensors in [`ModelParams::named_tensors`] order.
    pub fn from_tensors(
        config: &ModelConfig,
        positions: Vec<PositionTable>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let template = Self::init_shapes(config);
        if tensors.len() != template.len() {
            return Err(TensorError::Precondition(format!(
                "expected {} parameter tensors, got {}",
                template.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in template.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Precondition(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        if positions.len() != config.lsgc_layers() {
            return Err(TensorError::Precondition("one position table per layer".into()));
        }
        let mut it = tensors.into_iter();
        let dense = |it: &mut std::vec::IntoIter<Tensor>| Dense {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let transform = (0..config.transform_layers).map(|_| dense(&mut it)).collect();
        let mut layers = Vec::new();
        for (l, pos) in positions.into_iter().enumerate() {
            let t: [Tensor; 8] = std::array::from_fn(|_| it.next().unwrap());
            layers.push(LsgcParams::from_tensors(config.layer_dims(l), pos, t)?);
        }
        let classifier = dense(&mut it);
        Ok(Self {
            config: config.clone(),
            transform,
            layers,
            classifier,
        })
    }

    fn init_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..config.transform_layers {
            let inputs = if l == 0 { config.input_dim } else { config.transformed_dim };
            out.push((format!("transform.{l}.weight"), vec![inputs, config.transformed_dim]));
            out.push((format!("transform.{l}.bias"), vec![1, config.transformed_dim]));
        }
        for l in 0..config.lsgc_layers() {
            let shapes = LsgcParams::expected_shapes(&config.layer_dims(l));
            for (name, s) in LAYER_PARAM_NAMES.iter().zip(shapes) {
                out.push((format!("lsgc.{l}.{name}"), s));
            }
        }
        out.push(("classifier.weight".into(), vec![config.classifier_inputs(), config.num_classes]));
        out.push(("classifier.bias".into(), vec![1, config.num_classes]));
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<ModelVars<'t>> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars::from_flat(&self.config, &vars))
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    pub transform: Vec<(Var<'t>, Var<'t>)>,
    pub layers: Vec<LsgcVars<'t>>,
    pub classifier: (Var<'t>, Var<'t>),
}

impl<'t> ModelVars<'t> {
    /// Splits a flat list in [`ModelParams::named_tensors`] order.
    pub fn from_flat(config: &ModelConfig, vars: &[Var<'t>]) -> Self {
        let mut at = 0;
        let transform = (0..config.transform_layers)
            .map(|_| {
                at += 2;
                (vars[at - 2], vars[at - 1])
            })
            .collect();
        let layers = (0..config.lsgc_layers())
            .map(|_| {
                at += 8;
                LsgcVars::from_slice(&vars[at - 8..at])
            })
            .collect();
        let classifier = (vars[at], vars[at + 1]);
        Self {
            transform,
            layers,
            classifier,
        }
    }

    pub fn flat(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for &(w, b) in &self.transform {
            out.extend([w, b]);
        }
        for l in &self.layers {
            out.extend(l.all());
        }
        out.extend([self.classifier.0, self.classifier.1]);
        out
    }
}

/// Inverted dropout applied to transformed features during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout<'t>(x: Var<'t>, dropout: Option<&mut Dropout<'_>>) -> Result<Var<'t>> {
    let Some(d) = dropout else { return Ok(x) };
    if d.rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = 1.0 - d.rate;
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = x.tape().constant(Tensor::new(shape, mask)?)?;
    x.mul(&mask)
}

/// `tanh(X·W + b)` through every transform layer.
pub fn transform_features<'t>(vars: &ModelVars<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    let mut h = *x;
    for (w, b) in &vars.transform {
        h = h.matmul(w)?.add(b)?.tanh()?;
    }
    Ok(h)
}

fn gather_feature_rows(x: &Tensor, nodes: &[usize]) -> Result<Tensor> {
    let f = x.cols();
    let mut data = Vec::with_capacity(nodes.len() * f);
    for &n in nodes {
        if n >= x.rows() {
            return Err(TensorError::Index {
                op: "gather_features",
                index: n,
                extent: x.rows(),
            });
        }
        data.extend_from_slice(x.row(n));
    }
    Tensor::matrix(nodes.len(), f, data)
}

fn sorted_unique(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn positions_in(sorted: &[usize], ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .map(|id| sorted.binary_search(id).expect("id present"))
        .collect()
}

/// Logits for `centers`, `|centers| × num_classes`.
///
/// Only the feature rows inside the `n`-fold closure of the centers'
/// neighborhoods are transformed.
pub fn lsgcn_forward<'t>(
    params: &ModelParams,
    vars: &ModelVars<'t>,
    features: &Tensor,
    neighborhoods: &NeighborhoodCache,
    centers: &[usize],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'t>> {
    let config = &params.config;
    if config.kind != ModelKind::Lsgcn {
        return Err(TensorError::Precondition("lsgcn_forward on a non-lsgcn model".into()));
    }
    if features.rank() != 2 || features.cols() != config.input_dim || features.rows() != config.num_nodes {
        return Err(TensorError::ShapeMismatch {
            op: "lsgcn_forward",
            lhs: features.shape().to_vec(),
            rhs: vec![config.num_nodes, config.input_dim],
        });
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= config.num_nodes) {
        return Err(TensorError::Index {
            op: "lsgcn_forward",
            index: bad,
            extent: config.num_nodes,
        });
    }
    let tape = vars.classifier.0.tape();

    // needed[l] = nodes whose layer-l activation is required
    let n = params.layers.len();
    let mut needed = vec![sorted_unique(centers)];
    for _ in 0..n {
        let next = neighborhoods.closure(needed.last().unwrap());
        needed.push(next);
    }
    needed.reverse();

    let x = tape.constant(gather_feature_rows(features, &needed[0])?)?;
    let transformed = apply_dropout(transform_features(vars, &x)?, dropout)?;

    let mut act = transformed;
    for (l, (layer, layer_vars)) in params.layers.iter().zip(&vars.layers).enumerate() {
        let rows = RowIndex::Sorted(needed[l].clone());
        act = lsgc_forward(layer, layer_vars, &act, &rows, neighborhoods, &needed[l + 1])?;
    }

    let skip = transformed.embedding_lookup(&positions_in(&needed[0], centers))?;
    let deep = act.embedding_lookup(&positions_in(&needed[n], centers))?;
    let (w, b) = vars.classifier;
    skip.concat(&deep)?.matmul(&w)?.add(&b)
}

/// Logits of the graph-free baseline.
pub fn mlp_forward<'t>(
    params: &ModelParams,
    vars: &ModelVars<'t>,
    features: &Tensor,
    centers: &[usize],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'t>> {
    if params.config.kind != ModelKind::Mlp {
        return Err(TensorError::Precondition("mlp_forward on a non-mlp model".into()));
    }
    if features.rank() != 2 || features.cols() != params.config.input_dim {
        return Err(TensorError::ShapeMismatch {
            op: "mlp_forward",
            lhs: features.shape().to_vec(),
            rhs: vec![params.config.num_nodes, params.config.input_dim],
        });
    }
    let tape = vars.classifier.0.tape();
    let x = tape.constant(gather_feature_rows(features, centers)?)?;
    let t = apply_dropout(transform_features(vars, &x)?, dropout)?;
    let (w, b) = vars.classifier;
    t.matmul(&w)?.add(&b)
}

/// Dispatches on the model kind. `neighborhoods` is ignored by the MLP.
pub fn forward<'t>(
    params: &ModelParams,
    vars: &ModelVars<'t>,
    features: &Tensor,
    neighborhoods: Option<&NeighborhoodCache>,
    centers: &[usize],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var<'t>> {
    match params.config.kind {
        ModelKind::Mlp => mlp_forward(params, vars, features, centers, dropout),
        ModelKind::Lsgcn => {
            let cache = neighborhoods
                .ok_or_else(|| TensorError::Precondition("lsgcn forward needs neighborhoods".into()))?;
            lsgcn_forward(params, vars, features, cache, centers, dropout)
        }
    }
}
