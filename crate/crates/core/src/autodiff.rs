//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle in
//! execution order. [`Var::backward`] walks the records once in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//! Calling `backward` twice without [`Tape::zero_grad`] adds the gradients.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of propagating it.

use std::cell::{Cell, Ref, RefCell};

use crate::tensor::{Result, Tensor, TensorError};

/// Operation tags, used for error messages and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Sum,
    Mean,
    SumAll,
    Tanh,
    Gather,
    Concat,
    Reshape,
    Transpose,
    GroupedMatMul,
    SegmentMean,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Neg,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAll,
        OpKind::Tanh,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::GroupedMatMul,
        OpKind::SegmentMean,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum_all",
            OpKind::Tanh => "tanh",
            OpKind::Gather => "embedding_lookup",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::GroupedMatMul => "grouped_matmul",
            OpKind::SegmentMean => "segment_mean",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Sum { input: usize, axis: usize },
    Mean { input: usize, axis: usize },
    SumAll(usize),
    Tanh(usize),
    Gather { table: usize, indices: Vec<usize> },
    Concat(usize, usize),
    Reshape(usize),
    Transpose(usize),
    GroupedMatMul { x: usize, w: usize },
    SegmentMean { input: usize, offsets: Vec<usize> },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Neg(..) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAll(..) => OpKind::SumAll,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat(..) => OpKind::Concat,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::GroupedMatMul { .. } => OpKind::GroupedMatMul,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Test hook: doubles the upstream gradient fed into every backward rule
    /// of `kind`, producing a wrong gradient on purpose.
    #[doc(hidden)]
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.kind().name(),
            });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut adjoints: Vec<Option<Tensor>> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let shape = nodes[root].value.shape().to_vec();
            if nodes[root].value.numel() != 1 {
                return Err(TensorError::NotScalar { shape });
            }
            adjoints.resize_with(root + 1, || None);
            adjoints[root] = Some(Tensor::ones(&shape));
            let fault = self.fault.get();

            for id in (0..=root).rev() {
                let node = &nodes[id];
                if !node.requires_grad || matches!(node.op, Op::Leaf) {
                    continue;
                }
                let Some(mut upstream) = adjoints[id].take() else {
                    continue;
                };
                if fault == Some(node.op.kind()) {
                    upstream.data_mut().iter_mut().for_each(|g| *g *= 2.0);
                }
                for (input, grad) in backward_rule(&nodes, id, &upstream) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut adjoints[input] {
                        Some(acc) => acc.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
                // keep the root's seed out of its own accumulated grad
                adjoints[id] = None;
            }
        }

        let mut nodes = self.nodes.borrow_mut();
        for (id, node) in nodes.iter_mut().enumerate().take(root + 1) {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let contribution = adjoints[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if !contribution.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            match &mut node.grad {
                Some(g) => g.add_assign(&contribution),
                slot => *slot = Some(contribution),
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let value = {
            let a = self.value();
            let b = rhs.value();
            matmul_forward(&a, &b)?
        };
        self.tape
            .record(value, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, OpKind::Add)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, OpKind::Sub)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, OpKind::Mul)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        let value = map_values(&self.value(), |x| -x);
        self.tape.record(value, Op::Neg(self.id), &[self.id])
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let value = map_values(&self.value(), |x| x * factor);
        self.tape
            .record(value, Op::Scale(self.id, factor), &[self.id])
    }

    fn binary(&self, rhs: &Var<'t>, kind: OpKind) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let value = {
            let a = self.value();
            let b = rhs.value();
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                OpKind::Mul => |x, y| x * y,
                _ => unreachable!(),
            };
            broadcast_binary(kind.name(), &a, &b, f)?
        };
        let op = match kind {
            OpKind::Add => Op::Add(self.id, rhs.id),
            OpKind::Sub => Op::Sub(self.id, rhs.id),
            _ => Op::Mul(self.id, rhs.id),
        };
        self.tape.record(value, op, &[self.id, rhs.id])
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        let value = reduce_axis("sum", &self.value(), axis, false)?;
        self.tape.record(
            value,
            Op::Sum {
                input: self.id,
                axis,
            },
            &[self.id],
        )
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        let value = reduce_axis("mean", &self.value(), axis, true)?;
        self.tape.record(
            value,
            Op::Mean {
                input: self.id,
                axis,
            },
            &[self.id],
        )
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape
            .record(Tensor::scalar(total), Op::SumAll(self.id), &[self.id])
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        let value = map_values(&self.value(), f64::tanh);
        self.tape.record(value, Op::Tanh(self.id), &[self.id])
    }

    /// Gathers rows of a `V×d` table; backward scatter-adds into those rows.
    pub fn embedding_lookup(&self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let table = self.value();
            gather_rows("embedding_lookup", &table, indices)?
        };
        self.tape.record(
            value,
            Op::Gather {
                table: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        )
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let value = {
            let a = self.value();
            let b = rhs.value();
            concat_forward(&a, &b)?
        };
        self.tape
            .record(value, Op::Concat(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshaped(shape.to_vec())?;
        self.tape.record(value, Op::Reshape(self.id), &[self.id])
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            require_rank("transpose", &a, 2)?;
            transpose2(&a)
        };
        self.tape.record(value, Op::Transpose(self.id), &[self.id])
    }

    /// Block-diagonal product: `x` is `P×(G·a)`, `w` is `G×a×b`, the result is
    /// `P×(G·b)` where column block `g` equals `x_g · w_g`.
    pub fn grouped_matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w);
        let value = {
            let x = self.value();
            let w = w.value();
            grouped_matmul_forward(&x, &w)?
        };
        self.tape.record(
            value,
            Op::GroupedMatMul { x: self.id, w: w.id },
            &[self.id, w.id],
        )
    }

    /// Mean of consecutive row segments `offsets[s]..offsets[s+1]`.
    pub fn segment_mean(&self, offsets: &[usize]) -> Result<Var<'t>> {
        let value = segment_mean_forward(&self.value(), offsets)?;
        self.tape.record(
            value,
            Op::SegmentMean {
                input: self.id,
                offsets: offsets.to_vec(),
            },
            &[self.id],
        )
    }

    /// Mean negative log-likelihood of `labels` under the row softmax of `self`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = softmax_ce_forward(&self.value(), labels)?;
        self.tape.record(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            &[self.id],
        )
    }
}

fn map_values(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// `c = beta·c + a·b` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * rsc + j as isize * csc) as usize] = 0.0;
                }
            }
        }
        return;
    }
    // SAFETY: every caller passes slices covering the full strided extents of
    // an m×k, k×n and m×n view.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank("matmul", a, 2)?;
    require_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        0.0,
        &mut out,
        n as isize,
        1,
    );
    Tensor::matrix(m, n, out)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// True when `shape` (leading ones stripped) is a suffix of `out`, so the
/// operand repeats with period `numel`.
fn tiles_suffix(shape: &[usize], out: &[usize]) -> bool {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    let core = &shape[first..];
    core.len() <= out.len() && out[out.len() - core.len()..] == *core
}

/// Maps each flat index of `out` to the operand index and calls `f`.
fn for_each_broadcast(shape: &[usize], out: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out.iter().product();
    let numel: usize = shape.iter().product();
    if shape == out {
        (0..total).for_each(|i| f(i, i));
    } else if tiles_suffix(shape, out) {
        (0..total).for_each(|i| f(i, i % numel.max(1)));
    } else {
        let strides = broadcast_strides(shape, out);
        let mut counter = vec![0usize; out.len()];
        let mut src = 0usize;
        for i in 0..total {
            f(i, src);
            for axis in (0..out.len()).rev() {
                counter[axis] += 1;
                src += strides[axis];
                if counter[axis] < out[axis] {
                    break;
                }
                src -= strides[axis] * out[axis];
                counter[axis] = 0;
            }
        }
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let total: usize = out_shape.iter().product();
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data);
    }
    let mut a_idx = vec![0usize; total];
    for_each_broadcast(a.shape(), &out_shape, |i, s| a_idx[i] = s);
    let mut data = vec![0.0; total];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(b.shape(), &out_shape, |i, s| {
        data[i] = f(ad[a_idx[i]], bd[s]);
    });
    Tensor::new(out_shape, data)
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let g = grad.data();
    let o = out.data_mut();
    for_each_broadcast(shape, grad.shape(), |i, s| o[s] += g[i]);
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_axis(op: &'static str, t: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: t.shape().to_vec(),
        });
    }
    let (outer, len, inner) = split_axis(t.shape(), axis);
    if mean && len == 0 {
        return Err(TensorError::EmptyReduction { op });
    }
    let mut out = vec![0.0; outer * inner];
    let d = t.data();
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    if mean {
        let scale = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn expand_axis(grad: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Tensor::zeros(shape);
    let g = grad.data();
    let o_data = out.data_mut();
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                o_data[base + i] = g[o * inner + i] * scale;
            }
        }
    }
    out
}

fn gather_rows(op: &'static str, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    require_rank(op, table, 2)?;
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= rows {
            return Err(TensorError::Index {
                op,
                index: i,
                extent: rows,
            });
        }
        data.extend_from_slice(table.row(i));
    }
    Tensor::matrix(indices.len(), d, data)
}

fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank("concat", a, 2)?;
    require_rank("concat", b, 2)?;
    if a.shape()[0] != b.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "concat",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (n, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = Vec::with_capacity(n * (p + q));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
        data.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
    }
    Tensor::matrix(n, p + q, data)
}

fn transpose2(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::matrix(n, m, data).expect("transposed shape")
}

fn grouped_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    require_rank("grouped_matmul", x, 2)?;
    require_rank("grouped_matmul", w, 3)?;
    let (groups, a, b) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if x.shape()[1] != groups * a {
        return Err(TensorError::ShapeMismatch {
            op: "grouped_matmul",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok((x.shape()[0], groups, a, b))
}

fn grouped_matmul_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (p, groups, a, b) = grouped_dims(x, w)?;
    let mut out = vec![0.0; p * groups * b];
    for g in 0..groups {
        gemm(
            p,
            a,
            b,
            &x.data()[g * a..],
            (groups * a) as isize,
            1,
            &w.data()[g * a * b..],
            b as isize,
            1,
            0.0,
            &mut out[g * b..],
            (groups * b) as isize,
            1,
        );
    }
    Tensor::matrix(p, groups * b, out)
}

fn segment_mean_forward(t: &Tensor, offsets: &[usize]) -> Result<Tensor> {
    require_rank("segment_mean", t, 2)?;
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    if offsets.first() != Some(&0) || offsets.last() != Some(&rows) {
        return Err(TensorError::Precondition(format!(
            "segment_mean: offsets must start at 0 and end at {rows}"
        )));
    }
    let segments = offsets.len() - 1;
    let mut out = vec![0.0; segments * cols];
    for s in 0..segments {
        let (lo, hi) = (offsets[s], offsets[s + 1]);
        if hi <= lo {
            return Err(TensorError::EmptyReduction { op: "segment_mean" });
        }
        let acc = &mut out[s * cols..(s + 1) * cols];
        for r in lo..hi {
            for (o, v) in acc.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let scale = 1.0 / (hi - lo) as f64;
        acc.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::matrix(segments, cols, out)
}

fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    require_rank("softmax_cross_entropy", logits, 2)?;
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if n == 0 || n != labels.len() {
        return Err(TensorError::Precondition(format!(
            "softmax_cross_entropy: {n} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut probs = vec![0.0; n * classes];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: label,
                extent: classes,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * classes + j] = e;
            z += e;
        }
        for p in &mut probs[i * classes..(i + 1) * classes] {
            *p /= z;
        }
        loss += z.ln() - (row[label] - max);
    }
    Ok((loss / n as f64, probs))
}

/// Gradient contributions of node `id` to each of its inputs.
fn backward_rule(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let node = &nodes[id];
    let value = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => Vec::new(),
        &Op::MatMul(a, b) => {
            let (av, bv) = (value(a), value(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = Vec::new();
            if wants(a) {
                // g·bᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, 0.0, &mut ga, k as isize, 1);
                out.push((a, Tensor::matrix(m, k, ga).unwrap()));
            }
            if wants(b) {
                // aᵀ·g
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, 0.0, &mut gb, n as isize, 1);
                out.push((b, Tensor::matrix(k, n, gb).unwrap()));
            }
            out
        }
        &Op::Add(a, b) => vec![
            (a, unbroadcast(g, value(a).shape())),
            (b, unbroadcast(g, value(b).shape())),
        ],
        &Op::Sub(a, b) => vec![
            (a, unbroadcast(g, value(a).shape())),
            (b, unbroadcast(&map_values(g, |x| -x), value(b).shape())),
        ],
        &Op::Mul(a, b) => {
            let (av, bv) = (value(a), value(b));
            let mut out = Vec::new();
            if wants(a) {
                let gb = broadcast_binary("mul", g, bv, |x, y| x * y).unwrap();
                out.push((a, unbroadcast(&gb, av.shape())));
            }
            if wants(b) {
                let ga = broadcast_binary("mul", g, av, |x, y| x * y).unwrap();
                out.push((b, unbroadcast(&ga, bv.shape())));
            }
            out
        }
        &Op::Neg(a) => vec![(a, map_values(g, |x| -x))],
        &Op::Scale(a, c) => vec![(a, map_values(g, |x| x * c))],
        &Op::Sum { input, axis } => {
            vec![(input, expand_axis(g, value(input).shape(), axis, 1.0))]
        }
        &Op::Mean { input, axis } => {
            let shape = value(input).shape();
            let scale = 1.0 / shape[axis] as f64;
            vec![(input, expand_axis(g, shape, axis, scale))]
        }
        &Op::SumAll(a) => vec![(a, Tensor::full(value(a).shape(), g.item()))],
        &Op::Tanh(a) => {
            let y = node.value.data();
            let data = g
                .data()
                .iter()
                .zip(y)
                .map(|(gi, yi)| gi * (1.0 - yi * yi))
                .collect();
            vec![(a, Tensor::new(node.value.shape().to_vec(), data).unwrap())]
        }
        Op::Gather { table, indices } => {
            let t = value(*table);
            let d = t.shape()[1];
            let mut out = Tensor::zeros(t.shape());
            let o = out.data_mut();
            for (r, &i) in indices.iter().enumerate() {
                for (dst, src) in o[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..]) {
                    *dst += src;
                }
            }
            vec![(*table, out)]
        }
        &Op::Concat(a, b) => {
            let (p, q) = (value(a).shape()[1], value(b).shape()[1]);
            let n = g.shape()[0];
            let (mut ga, mut gb) = (Vec::with_capacity(n * p), Vec::with_capacity(n * q));
            for i in 0..n {
                let row = g.row(i);
                ga.extend_from_slice(&row[..p]);
                gb.extend_from_slice(&row[p..]);
            }
            vec![
                (a, Tensor::matrix(n, p, ga).unwrap()),
                (b, Tensor::matrix(n, q, gb).unwrap()),
            ]
        }
        &Op::Reshape(a) => vec![(a, g.clone().reshaped(value(a).shape().to_vec()).unwrap())],
        &Op::Transpose(a) => vec![(a, transpose2(g))],
        &Op::GroupedMatMul { x, w } => {
            let (xv, wv) = (value(x), value(w));
            let (p, groups, a, b) = grouped_dims(xv, wv).unwrap();
            let (rx, rg) = ((groups * a) as isize, (groups * b) as isize);
            let mut out = Vec::new();
            if wants(x) {
                let mut gx = vec![0.0; p * groups * a];
                for k in 0..groups {
                    // g_k · w_kᵀ
                    gemm(p, b, a, &g.data()[k * b..], rg, 1, &wv.data()[k * a * b..], 1, b as isize, 0.0, &mut gx[k * a..], rx, 1);
                }
                out.push((x, Tensor::matrix(p, groups * a, gx).unwrap()));
            }
            if wants(w) {
                let mut gw = vec![0.0; groups * a * b];
                for k in 0..groups {
                    // x_kᵀ · g_k
                    gemm(a, p, b, &xv.data()[k * a..], 1, rx, &g.data()[k * b..], rg, 1, 0.0, &mut gw[k * a * b..], b as isize, 1);
                }
                out.push((w, Tensor::new(vec![groups, a, b], gw).unwrap()));
            }
            out
        }
        Op::SegmentMean { input, offsets } => {
            let shape = value(*input).shape();
            let cols = shape[1];
            let mut out = Tensor::zeros(shape);
            let o = out.data_mut();
            for s in 0..offsets.len() - 1 {
                let (lo, hi) = (offsets[s], offsets[s + 1]);
                let scale = 1.0 / (hi - lo) as f64;
                let gs = g.row(s);
                for r in lo..hi {
                    for (dst, src) in o[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                        *dst = src * scale;
                    }
                }
            }
            vec![(*input, out)]
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let shape = value(*logits).shape();
            let (n, classes) = (shape[0], shape[1]);
            let scale = g.item() / n as f64;
            let mut grad = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                grad[i * classes + label] -= 1.0;
            }
            grad.iter_mut().for_each(|v| *v *= scale);
            vec![(*logits, Tensor::matrix(n, classes, grad).unwrap())]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[vec![1., 0.], vec![0., 1.]])).unwrap();
        let b = tape.constant(t(&[vec![3., 4.], vec![5., 6.]])).unwrap();
        assert_eq!(i2.matmul(&b).unwrap().value().data(), &[3., 4., 5., 6.]);

        let row = tape.constant(t(&[vec![1., 2.]])).unwrap();
        let col = tape.constant(t(&[vec![3.], vec![4.]])).unwrap();
        assert_eq!(row.matmul(&col).unwrap().value().data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] and [2, 3]"));
    }

    #[test]
    fn matmul_with_zero_inner_extent() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        let b = tape.constant(Tensor::zeros(&[0, 3])).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert!(c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1., 2., 3.])).unwrap();
        assert_eq!(a.sub(&a).unwrap().value().data(), &[0., 0., 0.]);
        let x = tape.constant(Tensor::vector(vec![2., 3.])).unwrap();
        let y = tape.constant(Tensor::vector(vec![4., 5.])).unwrap();
        assert_eq!(x.mul(&y).unwrap().value().data(), &[8., 15.]);
        assert_eq!(x.neg().unwrap().value().data(), &[-2., -3.]);
        let bad = tape.constant(Tensor::vector(vec![1., 2., 3.])).unwrap();
        assert!(matches!(
            x.add(&bad),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn broadcast_sub_backward_sums_over_rows() {
        let tape = Tape::new();
        let big = tape.param(Tensor::ones(&[4, 3])).unwrap();
        let row = tape.param(Tensor::matrix(1, 3, vec![0.5, 1.5, 2.5]).unwrap()).unwrap();
        let out = big.sub(&row).unwrap();
        assert_eq!(out.value().row(2), &[0.5, -0.5, -1.5]);
        out.sum_all().unwrap().backward().unwrap();
        assert_eq!(row.grad().unwrap().data(), &[-4., -4., -4.]);
        assert_eq!(big.grad().unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn broadcast_over_middle_axis() {
        // [2,1,3] + [2,2,1] -> [2,2,3], exercises the general strided path.
        let tape = Tape::new();
        let a = tape
            .param(Tensor::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap())
            .unwrap();
        let b = tape
            .param(Tensor::new(vec![2, 2, 1], vec![10., 20., 30., 40.]).unwrap())
            .unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 3]);
        assert_eq!(
            c.value().data(),
            &[10., 11., 12., 20., 21., 22., 33., 34., 35., 43., 44., 45.]
        );
        c.sum_all().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[2.0; 6]);
        assert_eq!(b.grad().unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![2., 4., 6.])).unwrap();
        let m = v.mean(0).unwrap();
        assert_eq!(m.shape(), Vec::<usize>::new());
        assert_eq!(m.value().item(), 4.0);
        let a = tape.constant(t(&[vec![1., 2.], vec![3., 4.]])).unwrap();
        assert_eq!(a.sum(1).unwrap().value().data(), &[3., 7.]);
        assert_eq!(a.sum(0).unwrap().value().data(), &[4., 6.]);
        assert!(matches!(a.sum(2), Err(TensorError::Axis { axis: 2, .. })));
        let empty = tape.constant(Tensor::zeros(&[3, 0])).unwrap();
        assert!(matches!(
            empty.mean(1),
            Err(TensorError::EmptyReduction { .. })
        ));
        assert_eq!(empty.sum(1).unwrap().value().data(), &[0., 0., 0.]);
    }

    #[test]
    fn tanh_values() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::vector(vec![0.0, 50.0, -50.0, 700.0]))
            .unwrap();
        let y = x.tanh().unwrap();
        let y = y.value();
        assert_eq!(y.data()[0], 0.0);
        // saturates in f64 but never leaves [-1, 1]
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn embedding_lookup_rows_and_scatter() {
        let tape = Tape::new();
        let table = tape
            .param(t(&[vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]]))
            .unwrap();
        assert_eq!(table.embedding_lookup(&[0]).unwrap().value().data(), &[1., 0., 0.]);
        let empty = table.embedding_lookup(&[]).unwrap();
        assert_eq!(empty.shape(), vec![0, 3]);
        assert!(matches!(
            table.embedding_lookup(&[3]),
            Err(TensorError::Index { index: 3, extent: 3, .. })
        ));
        table
            .embedding_lookup(&[1, 1])
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(
            table.grad().unwrap().data(),
            &[0., 0., 0., 2., 2., 2., 0., 0., 0.]
        );
    }

    #[test]
    fn concat_cases() {
        let tape = Tape::new();
        let a = tape.constant(t(&[vec![1.]])).unwrap();
        let b = tape.constant(t(&[vec![2.]])).unwrap();
        assert_eq!(a.concat(&b).unwrap().value().data(), &[1., 2.]);
        let empty = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        let q = tape.constant(t(&[vec![1., 2.], vec![3., 4.]])).unwrap();
        assert_eq!(*empty.concat(&q).unwrap().value(), *q.value());
        let short = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
        assert!(q.concat(&short).is_err());
    }

    #[test]
    fn softmax_ce_uniform_and_confident() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 7])).unwrap();
        let loss = uniform.softmax_cross_entropy(&[0, 3, 6]).unwrap();
        assert!((loss.value().item() - 7f64.ln()).abs() < 1e-12);
        let sure = tape
            .constant(t(&[vec![40., 0., 0.], vec![0., 0., 40.]]))
            .unwrap();
        let loss = sure.softmax_cross_entropy(&[0, 2]).unwrap().value().item();
        assert!((0.0..1e-15).contains(&loss));
        assert!(matches!(
            sure.softmax_cross_entropy(&[0, 3]),
            Err(TensorError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_and_fills_disconnected_leaves() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2., 3.])).unwrap();
        let y = tape.param(Tensor::vector(vec![5., 6.])).unwrap();
        assert!(matches!(
            x.tanh().unwrap().backward(),
            Err(TensorError::NotScalar { .. })
        ));
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1., 1.]);
        assert_eq!(y.grad().unwrap().data(), &[0., 0.]);
        // second call accumulates
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 2., 2.]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let tape = Tape::new();
        assert!(tape.constant(Tensor::vector(vec![f64::NAN])).is_err());
        let big = tape.constant(Tensor::vector(vec![1e300])).unwrap();
        assert_eq!(
            big.mul(&big).unwrap_err(),
            TensorError::NonFinite { op: "mul" }
        );
    }

    #[test]
    fn segment_mean_matches_manual() {
        let tape = Tape::new();
        let x = tape
            .param(t(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]))
            .unwrap();
        let m = x.segment_mean(&[0, 1, 3]).unwrap();
        assert_eq!(m.value().data(), &[1., 2., 4., 5.]);
        m.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1., 0.5, 0.5, 0.5, 0.5]);
        assert!(x.segment_mean(&[0, 0, 3]).is_err());
        assert!(x.segment_mean(&[0, 2]).is_err());
    }

    #[test]
    fn grouped_matmul_matches_blockwise_products() {
        let tape = Tape::new();
        // P=2, G=2, a=2, b=1
        let x = tape
            .constant(t(&[vec![1., 2., 3., 4.], vec![5., 6., 7., 8.]]))
            .unwrap();
        let w = tape
            .constant(Tensor::new(vec![2, 2, 1], vec![1., 1., 10., -1.]).unwrap())
            .unwrap();
        let y = x.grouped_matmul(&w).unwrap();
        assert_eq!(y.value().data(), &[3., 26., 11., 62.]);
        let bad = tape.constant(Tensor::zeros(&[3, 2, 1])).unwrap();
        assert!(x.grouped_matmul(&bad).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let tape = Tape::new();
            let a = tape
                .constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).sin()).collect()).unwrap())
                .unwrap();
            let b = tape
                .constant(Tensor::matrix(4, 2, (0..8).map(|i| (i as f64).cos()).collect()).unwrap())
                .unwrap();
            let out = a.matmul(&b).unwrap().tanh().unwrap();
            let v = out.value().clone();
            v
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transpose_swaps_axes() {
        let tape = Tape::new();
        let a = tape.param(t(&[vec![1., 2., 3.], vec![4., 5., 6.]])).unwrap();
        let at = a.transpose().unwrap();
        assert_eq!(at.shape(), vec![3, 2]);
        assert_eq!(at.value().data(), &[1., 4., 2., 5., 3., 6.]);
        let w = tape.constant(t(&[vec![1., 0.], vec![0., 2.], vec![3., 0.]])).unwrap();
        at.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1., 0., 3., 0., 2., 0.]);
    }

    #[test]
    fn op_names_round_trip() {
        for name in ["tanh", "matmul", "grouped_matmul", "segment_mean"] {
            assert_eq!(OpKind::from_name(name).unwrap().name(), name);
        }
        assert!(OpKind::from_name("conv2d").is_none());
    }
}
