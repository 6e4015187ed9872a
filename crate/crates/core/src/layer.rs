//! Lookup-subnet spatial graph convolution.
//!
//! For a center `i` with neighborhood `S = N(i, r)` and kernel `k`:
//!
//! ```text
//! out[i, k] = tanh( mean_{j in S} < L_k(E[P_i] - E[P_j]), H[j, :] > + b_k )
//! ```
//!
//! `E` is a learned position embedding, `L_k` a three-layer fully connected
//! subnet (tanh, tanh, linear) that turns a code difference into a weight
//! vector over the input channels, and `<.,.>` the channel dot product.
//!
//! The `K` subnets are evaluated batched. Parameter storage keeps each
//! kernel's weights in its own block:
//!
//! | tensor      | shape             | kernel `k` owns            |
//! |-------------|-------------------|----------------------------|
//! | `w1`        | `d_e × (K·h1)`    | columns `k·h1 .. (k+1)·h1` |
//! | `b1`        | `1 × (K·h1)`      | same columns               |
//! | `w2`        | `K × h1 × h2`     | slice `k`                  |
//! | `b2`        | `1 × (K·h2)`      | columns `k·h2 .. (k+1)·h2` |
//! | `w3`        | `K × h2 × C_in`   | slice `k`                  |
//! | `b3`        | `K × C_in`        | row `k`                    |
//! | `bias`      | `1 × K`           | column `k`                 |

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::graph::NeighborhoodCache;
use crate::tensor::{Result, Tensor, TensorError};

/// Node position indices `P`, a permutation of `0..num_nodes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionTable {
    indices: Vec<usize>,
}

impl PositionTable {
    pub fn identity(num_nodes: usize) -> Self {
        Self {
            indices: (0..num_nodes).collect(),
        }
    }

    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; indices.len()];
        for &p in &indices {
            if p >= indices.len() || std::mem::replace(&mut seen[p], true) {
                return Err(TensorError::Precondition(format!(
                    "position indices must be a permutation of 0..{}",
                    indices.len()
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, node: usize) -> usize {
        self.indices[node]
    }
}

/// Sizes of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub num_nodes: usize,
    pub code_dim: usize,
    pub kernels: usize,
    pub receptive_field: usize,
    pub in_channels: usize,
    pub hidden: [usize; 2],
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_nodes", self.num_nodes),
            ("code_dim", self.code_dim),
            ("kernels", self.kernels),
            ("receptive_field", self.receptive_field),
            ("in_channels", self.in_channels),
            ("hidden[0]", self.hidden[0]),
            ("hidden[1]", self.hidden[1]),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TensorError::Precondition(format!(
                    "layer {name} must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable state of one layer. See the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LsgcParams {
    pub dims: LayerDims,
    pub positions: PositionTable,
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub bias: Tensor,
}

pub const LAYER_PARAM_NAMES: [&str; 8] = ["embedding", "w1", "b1", "w2", "b2", "w3", "b3", "bias"];

/// Glorot-uniform matrix entries for a `fan_in → fan_out` map.
pub(crate) fn glorot<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// One kernel's subnet with its own matrices, in plain orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    /// `d_e × h1`
    pub w1: Tensor,
    pub b1: Vec<f64>,
    /// `h1 × h2`
    pub w2: Tensor,
    pub b2: Vec<f64>,
    /// `h2 × C_in`
    pub w3: Tensor,
    pub b3: Vec<f64>,
    pub bias: f64,
}

impl LsgcParams {
    /// Glorot-uniform subnet matrices, `N(0, embedding_std²)` codes, zero biases.
    pub fn init<R: Rng + ?Sized>(
        dims: LayerDims,
        embedding_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let LayerDims {
            num_nodes,
            code_dim,
            kernels,
            in_channels,
            hidden: [h1, h2],
            ..
        } = dims;
        let normal = Normal::new(0.0, embedding_std)
            .map_err(|e| TensorError::Precondition(format!("embedding std: {e}")))?;
        let embedding = Tensor::new(
            vec![num_nodes, code_dim],
            (0..num_nodes * code_dim).map(|_| normal.sample(rng)).collect(),
        )?;
        Ok(Self {
            dims,
            positions: PositionTable::identity(num_nodes),
            embedding,
            w1: glorot(&[code_dim, kernels * h1], code_dim, h1, rng),
            b1: Tensor::zeros(&[1, kernels * h1]),
            w2: glorot(&[kernels, h1, h2], h1, h2, rng),
            b2: Tensor::zeros(&[1, kernels * h2]),
            w3: glorot(&[kernels, h2, in_channels], h2, in_channels, rng),
            b3: Tensor::zeros(&[kernels, in_channels]),
            bias: Tensor::zeros(&[1, kernels]),
        })
    }

    /// Expected shape of every parameter tensor, in [`LAYER_PARAM_NAMES`] order.
    pub fn expected_shapes(dims: &LayerDims) -> [Vec<usize>; 8] {
        let LayerDims {
            num_nodes,
            code_dim: d,
            kernels: k,
            in_channels: c,
            hidden: [h1, h2],
            ..
        } = *dims;
        [
            vec![num_nodes, d],
            vec![d, k * h1],
            vec![1, k * h1],
            vec![k, h1, h2],
            vec![1, k * h2],
            vec![k, h2, c],
            vec![k, c],
            vec![1, k],
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.embedding,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.embedding,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.bias,
        ]
    }

    pub fn from_tensors(dims: LayerDims, positions: PositionTable, t: [Tensor; 8]) -> Result<Self> {
        dims.validate()?;
        for ((tensor, want), name) in t.iter().zip(Self::expected_shapes(&dims)).zip(LAYER_PARAM_NAMES) {
            if tensor.shape() != want.as_slice() {
                return Err(TensorError::Precondition(format!(
                    "layer parameter {name}: expected shape {want:?}, got {:?}",
                    tensor.shape()
                )));
            }
        }
        if positions.len() != dims.num_nodes {
            return Err(TensorError::Precondition(format!(
                "position table has {} entries for {} nodes",
                positions.len(),
                dims.num_nodes
            )));
        }
        let [embedding, w1, b1, w2, b2, w3, b3, bias] = t;
        Ok(Self {
            dims,
            positions,
            embedding,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            bias,
        })
    }

    /// Copies kernel `k`'s subnet out of the stacked storage.
    pub fn kernel(&self, k: usize) -> KernelWeights {
        let LayerDims {
            code_dim: d,
            kernels,
            in_channels: c,
            hidden: [h1, h2],
            ..
        } = self.dims;
        assert!(k < kernels);
        let mut w1 = Vec::with_capacity(d * h1);
        for row in 0..d {
            w1.extend_from_slice(&self.w1.row(row)[k * h1..(k + 1) * h1]);
        }
        KernelWeights {
            w1: Tensor::matrix(d, h1, w1).unwrap(),
            b1: self.b1.data()[k * h1..(k + 1) * h1].to_vec(),
            w2: Tensor::matrix(h1, h2, self.w2.data()[k * h1 * h2..(k + 1) * h1 * h2].to_vec()).unwrap(),
            b2: self.b2.data()[k * h2..(k + 1) * h2].to_vec(),
            w3: Tensor::matrix(h2, c, self.w3.data()[k * h2 * c..(k + 1) * h2 * c].to_vec()).unwrap(),
            b3: self.b3.row(k).to_vec(),
            bias: self.bias.data()[k],
        }
    }

    /// Zeroes every parameter that belongs to kernel `k`.
    pub fn zero_kernel(&mut self, k: usize) {
        let LayerDims {
            code_dim: d,
            in_channels: c,
            hidden: [h1, h2],
            ..
        } = self.dims;
        let kernels = self.dims.kernels;
        for row in 0..d {
            let base = row * kernels * h1;
            self.w1.data_mut()[base + k * h1..base + (k + 1) * h1].fill(0.0);
        }
        self.b1.data_mut()[k * h1..(k + 1) * h1].fill(0.0);
        self.w2.data_mut()[k * h1 * h2..(k + 1) * h1 * h2].fill(0.0);
        self.b2.data_mut()[k * h2..(k + 1) * h2].fill(0.0);
        self.w3.data_mut()[k * h2 * c..(k + 1) * h2 * c].fill(0.0);
        self.b3.data_mut()[k * c..(k + 1) * c].fill(0.0);
        self.bias.data_mut()[k] = 0.0;
    }

    /// Records the parameters on `tape` as leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<LsgcVars<'t>> {
        let [embedding, w1, b1, w2, b2, w3, b3, bias] = self.tensors().map(|t| t.clone());
        Ok(LsgcVars {
            embedding: tape.leaf(embedding, trainable)?,
            w1: tape.leaf(w1, trainable)?,
            b1: tape.leaf(b1, trainable)?,
            w2: tape.leaf(w2, trainable)?,
            b2: tape.leaf(b2, trainable)?,
            w3: tape.leaf(w3, trainable)?,
            b3: tape.leaf(b3, trainable)?,
            bias: tape.leaf(bias, trainable)?,
        })
    }
}

/// Layer parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LsgcVars<'t> {
    pub embedding: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub w3: Var<'t>,
    pub b3: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> LsgcVars<'t> {
    pub fn all(&self) -> [Var<'t>; 8] {
        [
            self.embedding,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.w3,
            self.b3,
            self.bias,
        ]
    }

    pub fn from_slice(v: &[Var<'t>]) -> Self {
        Self {
            embedding: v[0],
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
            w3: v[5],
            b3: v[6],
            bias: v[7],
        }
    }
}

/// Position codes `E[P[node]]` for each node, `n × d_e`.
pub fn encode_positions<'t>(
    params: &LsgcParams,
    vars: &LsgcVars<'t>,
    node_ids: &[usize],
) -> Result<Var<'t>> {
    let mut rows = Vec::with_capacity(node_ids.len());
    for &node in node_ids {
        if node >= params.positions.len() {
            return Err(TensorError::Index {
                op: "encode_positions",
                index: node,
                extent: params.positions.len(),
            });
        }
        rows.push(params.positions.get(node));
    }
    vars.embedding.embedding_lookup(&rows)
}

/// Row `j` is `center - neighbors[j]`.
pub fn code_diff<'t>(center: &Var<'t>, neighbors: &Var<'t>) -> Result<Var<'t>> {
    let (c, n) = (center.shape(), neighbors.shape());
    let width = *c.last().unwrap_or(&0);
    if n.len() != 2 || n[0] == 0 || c.iter().product::<usize>() != width || n[1] != width {
        return Err(TensorError::ShapeMismatch {
            op: "code_diff",
            lhs: c,
            rhs: n,
        });
    }
    center.sub(neighbors)
}

/// Kernel weights for each code difference: `m × K × C_in`, entry
/// `[j, k, :] = L_k(diffs[j])`.
pub fn lookup_weights<'t>(params: &LsgcParams, vars: &LsgcVars<'t>, diffs: &Var<'t>) -> Result<Var<'t>> {
    let LayerDims {
        code_dim,
        kernels,
        in_channels,
        ..
    } = params.dims;
    let shape = diffs.shape();
    if shape.len() != 2 || shape[1] != code_dim {
        return Err(TensorError::ShapeMismatch {
            op: "lookup_weights",
            lhs: shape,
            rhs: vec![code_dim],
        });
    }
    let m = shape[0];
    let hidden2 = diffs.matmul(&vars.w1)?.add(&vars.b1)?.tanh()?;
    let hidden2 = hidden2.grouped_matmul(&vars.w2)?.add(&vars.b2)?.tanh()?;
    let b3 = vars.b3.reshape(&[1, kernels * in_channels])?;
    hidden2
        .grouped_matmul(&vars.w3)?
        .add(&b3)?
        .reshape(&[m, kernels, in_channels])
}

/// Maps node ids to row positions of a materialized activation matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowIndex {
    /// Row `i` holds node `i`.
    Identity(usize),
    /// Rows hold these node ids, sorted ascending.
    Sorted(Vec<usize>),
}

impl RowIndex {
    pub fn len(&self) -> usize {
        match self {
            RowIndex::Identity(n) => *n,
            RowIndex::Sorted(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_of(&self, node: usize) -> Option<usize> {
        match self {
            RowIndex::Identity(n) => (node < *n).then_some(node),
            RowIndex::Sorted(ids) => ids.binary_search(&node).ok(),
        }
    }
}

fn rows_for(index: &RowIndex, nodes: &[usize], op: &'static str) -> Result<Vec<usize>> {
    nodes
        .iter()
        .map(|&n| {
            index.row_of(n).ok_or(TensorError::Index {
                op,
                index: n,
                extent: index.len(),
            })
        })
        .collect()
}

/// Layer output for `centers`, `|centers| × K`.
///
/// `h` holds one row per node listed in `rows`; it must cover the
/// neighborhood of every center. Neighbors are visited in ascending id order.
///
/// The first subnet layer is linear, so `W1ᵀ(e_i - e_j) = W1ᵀe_i - W1ᵀe_j` is
/// applied once per distinct node. Likewise the last layer is linear, so
/// `<W3ᵀz + b3, h_j> = <z, W3 h_j> + <b3, h_j>` moves the `C_in`-wide
/// contraction onto distinct nodes and leaves only an `h2`-wide dot product
/// per (center, neighbor, kernel).
pub fn lsgc_forward<'t>(
    params: &LsgcParams,
    vars: &LsgcVars<'t>,
    h: &Var<'t>,
    rows: &RowIndex,
    neighborhoods: &NeighborhoodCache,
    centers: &[usize],
) -> Result<Var<'t>> {
    let LayerDims {
        kernels,
        in_channels,
        hidden: [_, h2],
        ..
    } = params.dims;
    let h_shape = h.shape();
    if h_shape.len() != 2 || h_shape[0] != rows.len() || h_shape[1] != in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "lsgc_forward",
            lhs: h_shape,
            rhs: vec![rows.len(), in_channels],
        });
    }
    if neighborhoods.radius() != params.dims.receptive_field {
        return Err(TensorError::Precondition(format!(
            "neighborhoods have radius {}, layer expects {}",
            neighborhoods.radius(),
            params.dims.receptive_field
        )));
    }
    for &c in centers {
        if c >= neighborhoods.num_nodes() {
            return Err(TensorError::Index {
                op: "lsgc_forward",
                index: c,
                extent: neighborhoods.num_nodes(),
            });
        }
    }
    if centers.is_empty() {
        return vars.bias.embedding_lookup(&[])?.reshape(&[0, kernels]);
    }

    let unique = neighborhoods.closure(centers);
    let slot = |node: usize| unique.binary_search(&node).expect("closure covers members");
    let mut offsets = Vec::with_capacity(centers.len() + 1);
    let (mut center_slot, mut neighbor_slot) = (Vec::new(), Vec::new());
    offsets.push(0);
    for &c in centers {
        let cs = slot(c);
        for &j in neighborhoods.get(c) {
            center_slot.push(cs);
            neighbor_slot.push(slot(j));
        }
        offsets.push(neighbor_slot.len());
    }
    let pairs = neighbor_slot.len();

    let codes = encode_positions(params, vars, &unique)?;
    let projected = codes.matmul(&vars.w1)?;
    let hidden1 = projected
        .embedding_lookup(&center_slot)?
        .sub(&projected.embedding_lookup(&neighbor_slot)?)?
        .add(&vars.b1)?
        .tanh()?;
    let hidden2 = hidden1.grouped_matmul(&vars.w2)?.add(&vars.b2)?.tanh()?;

    let features = h.embedding_lookup(&rows_for(rows, &unique, "lsgc_forward")?)?;
    let w3_cols = vars.w3.reshape(&[kernels * h2, in_channels])?.transpose()?;
    let mixed = features.matmul(&w3_cols)?;
    let offset_term = features.matmul(&vars.b3.transpose()?)?;

    let response = hidden2
        .mul(&mixed.embedding_lookup(&neighbor_slot)?)?
        .reshape(&[pairs, kernels, h2])?
        .sum(2)?
        .add(&offset_term.embedding_lookup(&neighbor_slot)?)?;
    response.segment_mean(&offsets)?.add(&vars.bias)?.tanh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(n: usize, k: usize, c: usize, d: usize) -> LayerDims {
        LayerDims {
            num_nodes: n,
            code_dim: d,
            kernels: k,
            receptive_field: 1,
            in_channels: c,
            hidden: [3, 2],
        }
    }

    fn subnet_reference(w: &KernelWeights, x: &[f64]) -> Vec<f64> {
        let layer = |input: &[f64], m: &Tensor, b: &[f64], act: bool| -> Vec<f64> {
            (0..m.cols())
                .map(|o| {
                    let s: f64 = input.iter().enumerate().map(|(i, v)| v * m.at(i, o)).sum::<f64>() + b[o];
                    if act {
                        s.tanh()
                    } else {
                        s
                    }
                })
                .collect()
        };
        let a = layer(x, &w.w1, &w.b1, true);
        let b = layer(&a, &w.w2, &w.b2, true);
        layer(&b, &w.w3, &w.b3, false)
    }

    #[test]
    fn position_table_must_be_a_permutation() {
        assert!(PositionTable::from_indices(vec![2, 0, 1]).is_ok());
        assert!(PositionTable::from_indices(vec![0, 0, 1]).is_err());
        assert!(PositionTable::from_indices(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn encode_positions_reads_table_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LsgcParams::init(dims(4, 2, 3, 2), 0.1, &mut rng).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, true).unwrap();
        let codes = encode_positions(&p, &v, &[2]).unwrap();
        assert_eq!(codes.value().data(), p.embedding.row(2));
        assert_eq!(encode_positions(&p, &v, &[]).unwrap().shape(), vec![0, 2]);
        assert!(encode_positions(&p, &v, &[4]).is_err());
        // gradient lands in exactly the looked-up row
        codes.sum_all().unwrap().backward().unwrap();
        let g = v.embedding.grad().unwrap();
        assert_eq!(g.row(2), &[1.0, 1.0]);
        assert!(g.row(0).iter().chain(g.row(1)).chain(g.row(3)).all(|&x| x == 0.0));
    }

    #[test]
    fn code_diff_cases() {
        let tape = Tape::new();
        let center = tape.constant(Tensor::matrix(1, 2, vec![1., 1.]).unwrap()).unwrap();
        let nbrs = tape
            .constant(Tensor::from_rows(&[vec![0., 0.], vec![2., 2.], vec![1., 1.]]).unwrap())
            .unwrap();
        let d = code_diff(&center, &nbrs).unwrap();
        assert_eq!(d.value().data(), &[1., 1., -1., -1., 0., 0.]);
        let wrong = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(code_diff(&center, &wrong).is_err());
        let none = tape.constant(Tensor::zeros(&[0, 2])).unwrap();
        assert!(code_diff(&center, &none).is_err());
    }

    #[test]
    fn lookup_weights_zero_subnet_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = LsgcParams::init(dims(3, 2, 3, 2), 0.1, &mut rng).unwrap();
        for k in 0..2 {
            p.zero_kernel(k);
        }
        let tape = Tape::new();
        let v = p.bind(&tape, false).unwrap();
        let diffs = tape.constant(Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap()).unwrap();
        let w = lookup_weights(&p, &v, &diffs).unwrap();
        assert_eq!(w.shape(), vec![1, 2, 3]);
        assert!(w.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lookup_weights_match_per_kernel_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LsgcParams::init(dims(3, 2, 3, 2), 0.1, &mut rng).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false).unwrap();
        let xs = [vec![0.0, 0.0], vec![0.5, -0.25], vec![-1.0, 2.0]];
        let diffs = tape.constant(Tensor::from_rows(&xs).unwrap()).unwrap();
        let out = lookup_weights(&p, &v, &diffs).unwrap();
        let out = out.value();
        for (j, x) in xs.iter().enumerate() {
            for k in 0..2 {
                let expect = subnet_reference(&p.kernel(k), x);
                for c in 0..3 {
                    let got = out.data()[(j * 2 + k) * 3 + c];
                    assert!((got - expect[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_kernel_clears_only_that_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LsgcParams::init(dims(3, 3, 2, 2), 0.1, &mut rng).unwrap();
        let mut q = p.clone();
        q.zero_kernel(1);
        assert_eq!(p.kernel(0), q.kernel(0));
        assert_eq!(p.kernel(2), q.kernel(2));
        let z = q.kernel(1);
        assert!(z.w1.data().iter().chain(z.w2.data()).chain(z.w3.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_node_uses_subnet_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = LsgcParams::init(dims(3, 2, 2, 2), 0.1, &mut rng).unwrap();
        p.bias = Tensor::matrix(1, 2, vec![0.1, -0.2]).unwrap();
        let g = Graph::build(3, &[(0, 1)]).unwrap();
        let cache = NeighborhoodCache::build(&g, 1, None).unwrap();
        let h = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.], vec![0.5, -1.5]]).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false).unwrap();
        let hv = tape.constant(h.clone()).unwrap();
        let out = lsgc_forward(&p, &v, &hv, &RowIndex::Identity(3), &cache, &[2]).unwrap();
        for k in 0..2 {
            let w = subnet_reference(&p.kernel(k), &[0.0, 0.0]);
            let dot: f64 = w.iter().zip(h.row(2)).map(|(a, b)| a * b).sum();
            let expect = (dot + p.kernel(k).bias).tanh();
            assert!((out.value().data()[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = LsgcParams::init(dims(3, 2, 2, 2), 0.1, &mut rng).unwrap();
        p.w3.data_mut().fill(0.0);
        let g = Graph::build(3, &[(0, 1), (1, 2)]).unwrap();
        let cache = NeighborhoodCache::build(&g, 1, None).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false).unwrap();
        let h = tape.constant(Tensor::full(&[3, 2], 0.7)).unwrap();
        let out = lsgc_forward(&p, &v, &h, &RowIndex::Identity(3), &cache, &[0, 1, 2]).unwrap();
        assert!(out.value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LsgcParams::init(dims(3, 2, 2, 2), 0.1, &mut rng).unwrap();
        let g = Graph::build(3, &[(0, 1)]).unwrap();
        let cache = NeighborhoodCache::build(&g, 1, None).unwrap();
        let wrong_radius = NeighborhoodCache::build(&g, 2, None).unwrap();
        let tape = Tape::new();
        let v = p.bind(&tape, false).unwrap();
        let h = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let narrow = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
        let all = RowIndex::Identity(3);
        assert!(lsgc_forward(&p, &v, &narrow, &all, &cache, &[0]).is_err());
        assert!(lsgc_forward(&p, &v, &h, &all, &wrong_radius, &[0]).is_err());
        assert!(lsgc_forward(&p, &v, &h, &all, &cache, &[3]).is_err());
        // rows that miss a neighbor
        let partial = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(lsgc_forward(&p, &v, &partial, &RowIndex::Sorted(vec![0]), &cache, &[0]).is_err());
        let empty = lsgc_forward(&p, &v, &h, &all, &cache, &[]).unwrap();
        assert_eq!(empty.shape(), vec![0, 2]);
    }
}
