//! Built-in gradient-check suite over every tensor op, the lsgc layer and
//! the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OpKind, Tape, Var};
use crate::gradcheck::grad_check_with;
use crate::graph::{Graph, NeighborhoodCache};
use crate::layer::{lsgc_forward, LayerDims, LsgcParams, LsgcVars, RowIndex};
use crate::model::{forward, ModelConfig, ModelKind, ModelParams, ModelVars};
use crate::tensor::{Result, Tensor};

pub const TOLERANCE: f64 = 1e-4;

type Objective = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

pub struct Case {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed, uneven weights.
fn probe<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let weights = (0..n).map(|i| 0.3 + ((i * 37 + 11) % 17) as f64 / 10.0).collect();
    let w = out.tape().constant(Tensor::new(shape, weights)?)?;
    out.mul(&w)?.sum_all()
}

fn case(name: &'static str, params: Vec<Tensor>, objective: Objective) -> Case {
    Case {
        name,
        params,
        objective,
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let m = |rng: &mut ChaCha8Rng, r, c| random(&[r, c], rng, -1.0, 1.0);
    vec![
        case(
            "matmul",
            vec![m(rng, 3, 4), m(rng, 4, 2)],
            Box::new(|_, v| probe(v[0].matmul(&v[1])?)),
        ),
        case(
            "add",
            vec![m(rng, 3, 4), m(rng, 1, 4)],
            Box::new(|_, v| probe(v[0].add(&v[1])?)),
        ),
        case(
            "sub",
            vec![m(rng, 3, 4), m(rng, 3, 1)],
            Box::new(|_, v| probe(v[0].sub(&v[1])?)),
        ),
        case(
            "mul",
            vec![m(rng, 3, 4), m(rng, 3, 4)],
            Box::new(|_, v| probe(v[0].mul(&v[1])?)),
        ),
        case("neg", vec![m(rng, 2, 3)], Box::new(|_, v| probe(v[0].neg()?))),
        case("scale", vec![m(rng, 2, 3)], Box::new(|_, v| probe(v[0].scale(-1.7)?))),
        case(
            "sum",
            vec![random(&[2, 3, 4], rng, -1.0, 1.0)],
            Box::new(|_, v| probe(v[0].sum(1)?)),
        ),
        case("mean", vec![m(rng, 3, 5)], Box::new(|_, v| probe(v[0].mean(0)?))),
        case("sum_all", vec![m(rng, 3, 2)], Box::new(|_, v| v[0].sum_all())),
        case("tanh", vec![m(rng, 3, 3)], Box::new(|_, v| probe(v[0].tanh()?))),
        case(
            "embedding_lookup",
            vec![m(rng, 4, 3)],
            Box::new(|_, v| probe(v[0].embedding_lookup(&[2, 0, 2, 3])?)),
        ),
        case(
            "concat",
            vec![m(rng, 3, 2), m(rng, 3, 4)],
            Box::new(|_, v| probe(v[0].concat(&v[1])?)),
        ),
        case(
            "reshape",
            vec![m(rng, 2, 6)],
            Box::new(|_, v| probe(v[0].reshape(&[3, 4])?.tanh()?)),
        ),
        case("transpose", vec![m(rng, 2, 5)], Box::new(|_, v| probe(v[0].transpose()?))),
        case(
            "grouped_matmul",
            vec![m(rng, 4, 6), random(&[3, 2, 3], rng, -1.0, 1.0)],
            Box::new(|_, v| probe(v[0].grouped_matmul(&v[1])?)),
        ),
        case(
            "segment_mean",
            vec![m(rng, 6, 3)],
            Box::new(|_, v| probe(v[0].segment_mean(&[0, 2, 3, 6])?)),
        ),
        case(
            "softmax_cross_entropy",
            vec![random(&[4, 3], rng, -2.0, 2.0)],
            Box::new(|_, v| v[0].softmax_cross_entropy(&[0, 2, 1, 2])),
        ),
    ]
}

fn layer_case(rng: &mut ChaCha8Rng) -> Case {
    let graph = Graph::build(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 4)]).unwrap();
    let cache = NeighborhoodCache::build(&graph, 1, None).unwrap();
    let dims = LayerDims {
        num_nodes: 5,
        code_dim: 4,
        kernels: 3,
        receptive_field: 1,
        in_channels: 3,
        hidden: [4, 3],
    };
    let mut layer = LsgcParams::init(dims, 0.7, rng).unwrap();
    for t in layer.tensors_mut() {
        // non-zero biases so every parameter has a non-trivial gradient
        if t.data().iter().all(|&x| x == 0.0) {
            *t = random(t.shape(), rng, -0.3, 0.3);
        }
    }
    let mut params: Vec<Tensor> = layer.tensors().into_iter().cloned().collect();
    params.push(random(&[5, 3], rng, -1.0, 1.0));
    case(
        "lsgc_layer",
        params,
        Box::new(move |_, v| {
            let vars = LsgcVars::from_slice(&v[..8]);
            let out = lsgc_forward(&layer, &vars, &v[8], &RowIndex::Identity(5), &cache, &[0, 1, 2, 3, 4])?;
            probe(out)
        }),
    )
}

fn model_case(rng: &mut ChaCha8Rng) -> Case {
    let graph = Graph::build(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (2, 3)]).unwrap();
    let cache = NeighborhoodCache::build(&graph, 1, None).unwrap();
    let mut config = ModelConfig {
        kind: ModelKind::Lsgcn,
        transformed_dim: 3,
        code_dim: 2,
        kernels: 2,
        receptive_field: 1,
        subnet_hidden: [3, 3],
        transform_layers: 1,
        num_lsgc_layers: 1,
        dropout: 0.0,
        embedding_init_std: 0.7,
        input_dim: 0,
        num_classes: 0,
        num_nodes: 0,
    };
    config.resolve(6, 4, 2).unwrap();
    let mut model = ModelParams::init(&config, rng.random()).unwrap();
    for t in model.tensors_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            *t = random(t.shape(), rng, -0.3, 0.3);
        }
    }
    let features = random(&[6, 4], rng, 0.0, 1.0);
    let params = model.tensors().into_iter().cloned().collect();
    case(
        "lsgcn_model",
        params,
        Box::new(move |_, v| {
            let vars = ModelVars::from_flat(&model.config, v);
            let logits = forward(&model, &vars, &features, Some(&cache), &[0, 2, 3, 5], None)?;
            logits.softmax_cross_entropy(&[0, 0, 1, 1])
        }),
    )
}

/// Every case of the suite, built from a fixed seed.
pub fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut all = op_cases(&mut rng);
    all.push(layer_case(&mut rng));
    all.push(model_case(&mut rng));
    all
}

/// Runs the suite with central differences of step `eps`. `fault` corrupts
/// the backward rule of one op on the analytic tape.
pub fn run_suite(eps: f64, fault: Option<OpKind>) -> Result<Vec<CaseResult>> {
    cases()
        .into_iter()
        .map(|c| {
            let err = grad_check_with(&c.objective, &c.params, eps, |t| t.inject_fault(fault))?;
            Ok(CaseResult {
                name: c.name,
                max_rel_error: err,
                pass: err < TOLERANCE,
            })
        })
        .collect()
}
