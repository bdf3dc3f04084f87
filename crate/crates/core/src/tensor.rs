//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation executed on tensors that participate in
//! gradient computation. [`Tape::backward`] replays the record in reverse,
//! visiting each operation exactly once, and deposits `dLoss/dLeaf` on every
//! leaf created with `requires_grad`. Tapes are single-threaded; independent
//! tapes (one per evaluation batch, say) may run in parallel.

use std::cell::{Cell, RefCell};

use crate::array::Array;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("L2-normalize of a zero vector")]
    ZeroNorm,
    #[error("operands belong to different tapes")]
    CrossTape,
    #[error("invalid argument to {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

enum Op {
    Leaf,
    Add(usize, usize),
    /// rhs shape is a suffix of lhs shape; rhs is broadcast over the leading axes.
    AddSuffix(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    TransposeLast2(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    /// out[b, g] = in[b, map[g]] for a 2-D input.
    GatherCols { input: usize, map: Vec<usize> },
    /// Row lookup into a 2-D table (embedding); backward scatter-adds.
    SelectRows { input: usize, ids: Vec<usize> },
    /// out[b] = in[b, ids[b]] for a 2-D input.
    TakePerRow { input: usize, ids: Vec<usize> },
    /// Prepend a batch axis and repeat the input `batch` times.
    BroadcastToBatch { input: usize, batch: usize },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sign(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Softmax(usize),
    LogSoftmax(usize),
    L2Normalize(usize),
    LayerNorm { input: usize, gamma: usize, beta: usize, eps: f64 },
    MeanAll(usize),
    SumAll(usize),
}

struct Node {
    value: Array,
    requires_grad: bool,
    grad: Option<Array>,
    op: Op,
}

/// Ordered record of executed operations. Creation order is topological:
/// every node is pushed after the nodes producing its inputs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Insert a value as a tape leaf. Non-finite input is rejected.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Result<Tensor<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(value, requires_grad, Op::Leaf))
    }

    /// Insert a value that never receives gradient.
    pub fn constant(&self, value: Array) -> Result<Tensor<'_>> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&self, value: f64) -> Result<Tensor<'_>> {
        self.constant(Array::scalar(value))
    }

    fn push_unchecked(&self, value: Array, requires_grad: bool, op: Op) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, requires_grad, grad: None, op });
        Tensor { tape: self, id }
    }

    fn push(&self, name: &'static str, value: Array, requires_grad: bool, op: Op) -> Result<Tensor<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagate `dLoss/dNode` from a scalar loss to every `requires_grad`
    /// node. Errors on a non-scalar loss or a second backward call.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        if !std::ptr::eq(self, loss.tape) {
            return Err(TensorError::CrossTape);
        }
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done.set(true);

        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: nodes[loss.id].value.shape().to_vec() });
        }

        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &gy, &mut grads);
            nodes[id].grad = Some(
                Array::new(nodes[id].value.shape().to_vec(), gy).expect("grad shape"),
            );
        }
        Ok(())
    }
}

/// Accumulate `delta` into the gradient slot of `id` (skipped for nodes that
/// do not require grad).
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, delta: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

fn backprop_node(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gy);
            accumulate(nodes, grads, *b, gy);
        }
        Op::AddSuffix(a, b) => {
            accumulate(nodes, grads, *a, gy);
            if nodes[*b].requires_grad {
                let bn = nodes[*b].value.numel();
                let mut gb = vec![0.0; bn];
                for (i, g) in gy.iter().enumerate() {
                    gb[i % bn] += g;
                }
                accumulate(nodes, grads, *b, &gb);
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gy);
            if nodes[*b].requires_grad {
                let gb: Vec<f64> = gy.iter().map(|g| -g).collect();
                accumulate(nodes, grads, *b, &gb);
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, v)| g * v).collect();
                accumulate(nodes, grads, *a, &ga);
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb: Vec<f64> = gy.iter().zip(av).map(|(g, v)| g * v).collect();
                accumulate(nodes, grads, *b, &gb);
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(nodes[id].op, Op::Minimum(..));
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            // Subgradient: route to the selected operand, split evenly on ties.
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for i in 0..av.len() {
                let (pa, pb) = if av[i] == bv[i] {
                    (0.5, 0.5)
                } else if (av[i] < bv[i]) == is_min {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                };
                ga[i] = gy[i] * pa;
                gb[i] = gy[i] * pb;
            }
            accumulate(nodes, grads, *a, &ga);
            accumulate(nodes, grads, *b, &gb);
        }
        Op::Scale(a, c) => {
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = gy.iter().map(|g| g * c).collect();
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, gy),
        Op::MatMul(a, b) => backprop_matmul(nodes, grads, *a, *b, gy),
        Op::TransposeLast2(a) => {
            if nodes[*a].requires_grad {
                let out_shape = nodes[id].value.shape().to_vec();
                let ga = transpose_last2_raw(gy, &out_shape);
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, gy),
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[id].value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total_axis = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[*axis];
                if nodes[inp].requires_grad {
                    let mut gi = vec![0.0; nodes[inp].value.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            let src = (o * total_axis + offset + j) * inner;
                            let dst = (o * len + j) * inner;
                            gi[dst..dst + inner].copy_from_slice(&gy[src..src + inner]);
                        }
                    }
                    accumulate(nodes, grads, inp, &gi);
                }
                offset += len;
            }
        }
        Op::Narrow { input, axis, start } => {
            if nodes[*input].requires_grad {
                let in_shape = nodes[*input].value.shape().to_vec();
                let out_shape = nodes[id].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut gi = vec![0.0; nodes[*input].value.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = (o * in_shape[*axis] + start + j) * inner;
                        let src = (o * len + j) * inner;
                        gi[dst..dst + inner].copy_from_slice(&gy[src..src + inner]);
                    }
                }
                accumulate(nodes, grads, *input, &gi);
            }
        }
        Op::GatherCols { input, map } => {
            if nodes[*input].requires_grad {
                let in_shape = nodes[*input].value.shape();
                let rows = in_shape[0];
                let f_in = in_shape[1];
                let f_out = map.len();
                let mut gi = vec![0.0; rows * f_in];
                for r in 0..rows {
                    for (g, &src_col) in map.iter().enumerate() {
                        gi[r * f_in + src_col] += gy[r * f_out + g];
                    }
                }
                accumulate(nodes, grads, *input, &gi);
            }
        }
        Op::SelectRows { input, ids } => {
            if nodes[*input].requires_grad {
                let d = nodes[*input].value.shape()[1];
                let mut gi = vec![0.0; nodes[*input].value.numel()];
                for (r, &row) in ids.iter().enumerate() {
                    for c in 0..d {
                        gi[row * d + c] += gy[r * d + c];
                    }
                }
                accumulate(nodes, grads, *input, &gi);
            }
        }
        Op::TakePerRow { input, ids } => {
            if nodes[*input].requires_grad {
                let cols = nodes[*input].value.shape()[1];
                let mut gi = vec![0.0; nodes[*input].value.numel()];
                for (r, &c) in ids.iter().enumerate() {
                    gi[r * cols + c] += gy[r];
                }
                accumulate(nodes, grads, *input, &gi);
            }
        }
        Op::BroadcastToBatch { input, batch } => {
            if nodes[*input].requires_grad {
                let n = nodes[*input].value.numel();
                let mut gi = vec![0.0; n];
                for b in 0..*batch {
                    for i in 0..n {
                        gi[i] += gy[b * n + i];
                    }
                }
                accumulate(nodes, grads, *input, &gi);
            }
        }
        Op::Exp(a) => {
            if nodes[*a].requires_grad {
                let y = nodes[id].value.data();
                let ga: Vec<f64> = gy.iter().zip(y).map(|(g, v)| g * v).collect();
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Log(a) => {
            if nodes[*a].requires_grad {
                let x = nodes[*a].value.data();
                let ga: Vec<f64> = gy.iter().zip(x).map(|(g, v)| g / v).collect();
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Relu(a) => {
            if nodes[*a].requires_grad {
                let x = nodes[*a].value.data();
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Gelu(a) => {
            if nodes[*a].requires_grad {
                let x = nodes[*a].value.data();
                let ga: Vec<f64> = gy.iter().zip(x).map(|(g, v)| g * gelu_grad(*v)).collect();
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Sigmoid(a) => {
            if nodes[*a].requires_grad {
                let y = nodes[id].value.data();
                let ga: Vec<f64> = gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Sign(a) => {
            // Zero almost everywhere.
            if nodes[*a].requires_grad {
                let ga = vec![0.0; gy.len()];
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::Clamp { input, lo, hi } => {
            if nodes[*input].requires_grad {
                let x = nodes[*input].value.data();
                // Identity inside [lo, hi] (boundaries included), zero outside.
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(nodes, grads, *input, &ga);
            }
        }
        Op::Softmax(a) => {
            if nodes[*a].requires_grad {
                let y = nodes[id].value.data();
                let shape = nodes[id].value.shape();
                let cols = *shape.last().unwrap();
                let rows = y.len() / cols;
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let o = r * cols;
                    let dot: f64 = (0..cols).map(|c| gy[o + c] * y[o + c]).sum();
                    for c in 0..cols {
                        ga[o + c] = (gy[o + c] - dot) * y[o + c];
                    }
                }
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::LogSoftmax(a) => {
            if nodes[*a].requires_grad {
                let y = nodes[id].value.data();
                let cols = *nodes[id].value.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let o = r * cols;
                    let gsum: f64 = (0..cols).map(|c| gy[o + c]).sum();
                    for c in 0..cols {
                        ga[o + c] = gy[o + c] - y[o + c].exp() * gsum;
                    }
                }
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::L2Normalize(a) => {
            if nodes[*a].requires_grad {
                let x = nodes[*a].value.data();
                let y = nodes[id].value.data();
                let cols = *nodes[id].value.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let o = r * cols;
                    let norm: f64 = x[o..o + cols].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..cols).map(|c| gy[o + c] * y[o + c]).sum();
                    for c in 0..cols {
                        ga[o + c] = (gy[o + c] - y[o + c] * dot) / norm;
                    }
                }
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::LayerNorm { input, gamma, beta, eps } => {
            let x = nodes[*input].value.data();
            let g = nodes[*gamma].value.data();
            let cols = g.len();
            let rows = x.len() / cols;
            let mut gx = vec![0.0; x.len()];
            let mut gg = vec![0.0; cols];
            let mut gb = vec![0.0; cols];
            for r in 0..rows {
                let o = r * cols;
                let row = &x[o..o + cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mut sum_dyg = 0.0;
                let mut sum_dyg_xhat = 0.0;
                for c in 0..cols {
                    let xhat = (row[c] - mean) * inv;
                    let dyg = gy[o + c] * g[c];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xhat;
                    gg[c] += gy[o + c] * xhat;
                    gb[c] += gy[o + c];
                }
                for c in 0..cols {
                    let xhat = (row[c] - mean) * inv;
                    let dyg = gy[o + c] * g[c];
                    gx[o + c] = inv
                        * (dyg - sum_dyg / cols as f64 - xhat * sum_dyg_xhat / cols as f64);
                }
            }
            accumulate(nodes, grads, *input, &gx);
            accumulate(nodes, grads, *gamma, &gg);
            accumulate(nodes, grads, *beta, &gb);
        }
        Op::MeanAll(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].value.numel();
                let ga = vec![gy[0] / n as f64; n];
                accumulate(nodes, grads, *a, &ga);
            }
        }
        Op::SumAll(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].value.numel();
                let ga = vec![gy[0]; n];
                accumulate(nodes, grads, *a, &ga);
            }
        }
    }
}

fn backprop_matmul(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    b: usize,
    gy: &[f64],
) {
    let ashape = nodes[a].value.shape().to_vec();
    let bshape = nodes[b].value.shape().to_vec();
    let av = nodes[a].value.data();
    let bv = nodes[b].value.data();
    match (ashape.len(), bshape.len()) {
        (2, 2) => {
            let (m, k) = (ashape[0], ashape[1]);
            let n = bshape[1];
            if nodes[a].requires_grad {
                let mut ga = vec![0.0; m * k];
                matmul_nt(gy, bv, m, n, k, &mut ga);
                accumulate(nodes, grads, a, &ga);
            }
            if nodes[b].requires_grad {
                let mut gb = vec![0.0; k * n];
                matmul_tn(av, gy, m, k, n, &mut gb);
                accumulate(nodes, grads, b, &gb);
            }
        }
        (3, 3) => {
            let (bs, m, k) = (ashape[0], ashape[1], ashape[2]);
            let n = bshape[2];
            if nodes[a].requires_grad {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    matmul_nt(
                        &gy[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                accumulate(nodes, grads, a, &ga);
            }
            if nodes[b].requires_grad {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    matmul_tn(
                        &av[i * m * k..(i + 1) * m * k],
                        &gy[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                accumulate(nodes, grads, b, &gb);
            }
        }
        (3, 2) => {
            let (bs, m, k) = (ashape[0], ashape[1], ashape[2]);
            let n = bshape[1];
            let rows = bs * m;
            if nodes[a].requires_grad {
                let mut ga = vec![0.0; rows * k];
                matmul_nt(gy, bv, rows, n, k, &mut ga);
                accumulate(nodes, grads, a, &ga);
            }
            if nodes[b].requires_grad {
                let mut gb = vec![0.0; k * n];
                matmul_tn(av, gy, rows, k, n, &mut gb);
                accumulate(nodes, grads, b, &gb);
            }
        }
        _ => unreachable!("matmul rank combination validated at forward time"),
    }
}

/// C[m,n] += A[m,k] * B[k,n], all row-major.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T  (B given row-major, used untransposed rows).
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += a_row[j] * b_row[j];
            }
            c_row[p] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

fn transpose_last2_raw(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let (r, c) = (shape[rank - 2], shape[rank - 1]);
    let batch = data.len() / (r * c);
    let mut out = vec![0.0; data.len()];
    for bi in 0..batch {
        let o = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[o + j * r + i] = data[o + i * c + j];
            }
        }
    }
    out
}

fn gelu_value(x: f64) -> f64 {
    // tanh approximation
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_value(self.id, |v| v.numel())
    }

    pub fn value(&self) -> Array {
        self.tape.with_value(self.id, |v| v.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> Result<f64> {
        self.tape.with_value(self.id, |v| {
            if v.numel() == 1 {
                Ok(v.data()[0])
            } else {
                Err(TensorError::NotScalar { shape: v.shape().to_vec() })
            }
        })
    }

    /// Gradient deposited by [`Tape::backward`]; `None` for detached tensors
    /// or before backward ran.
    pub fn grad(&self) -> Option<Array> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Tensor<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            let _ = op;
            Err(TensorError::CrossTape)
        }
    }

    fn binary_elementwise(
        &self,
        other: Tensor<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor<'t>> {
        self.same_tape(&other, name)?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                });
            }
            let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            (
                Array::new(a.shape().to_vec(), data).expect("same shape"),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        self.tape.push(name, value, rg, op(self.id, other.id))
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let data: Vec<f64> = a.data().iter().map(|x| f(*x)).collect();
            (Array::new(a.shape().to_vec(), data).expect("same shape"), nodes[self.id].requires_grad)
        };
        self.tape.push(name, value, rg, op(self.id))
    }

    pub fn add(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn minimum(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(other, "minimum", f64::min, Op::Minimum)
    }

    pub fn maximum(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary_elementwise(other, "maximum", f64::max, Op::Maximum)
    }

    /// Add `other` (whose shape must be a suffix of `self`'s) broadcast over
    /// the leading axes.
    pub fn add_suffix(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&other, "add_suffix")?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (ash, bsh) = (a.shape(), b.shape());
            if bsh.len() > ash.len() || &ash[ash.len() - bsh.len()..] != bsh {
                return Err(TensorError::ShapeMismatch {
                    op: "add_suffix",
                    detail: format!("{:?} vs suffix {:?}", ash, bsh),
                });
            }
            let bn = b.numel();
            let data: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data()[i % bn])
                .collect();
            (
                Array::new(ash.to_vec(), data).expect("same shape"),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        self.tape.push("add_suffix", value, rg, Op::AddSuffix(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<'t>> {
        self.unary("scale", |x| x * c, |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<'t>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar)
    }

    pub fn neg(&self) -> Result<Tensor<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Result<Tensor<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor<'t>> {
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn relu(&self) -> Result<Tensor<'t>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu)
    }

    pub fn gelu(&self) -> Result<Tensor<'t>> {
        self.unary("gelu", gelu_value, Op::Gelu)
    }

    pub fn sigmoid(&self) -> Result<Tensor<'t>> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid,
        )
    }

    /// Element-wise sign with sign(0) = 0.
    pub fn sign(&self) -> Result<Tensor<'t>> {
        self.unary(
            "sign",
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            Op::Sign,
        )
    }

    /// Clamp to `[lo, hi]`. Gradient is identity inside the interval
    /// (boundaries included) and zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor<'t>> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArg {
                op: "clamp",
                detail: format!("lo {} > hi {}", lo, hi),
            });
        }
        self.unary("clamp", |x| x.clamp(lo, hi), |a| Op::Clamp { input: a, lo, hi })
    }

    pub fn matmul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_tape(&other, "matmul")?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (ash, bsh) = (a.shape(), b.shape());
            let value = match (ash.len(), bsh.len()) {
                (2, 2) if ash[1] == bsh[0] => {
                    let (m, k, n) = (ash[0], ash[1], bsh[1]);
                    let mut c = vec![0.0; m * n];
                    matmul_nn(a.data(), b.data(), m, k, n, &mut c);
                    Array::new(vec![m, n], c).expect("shape")
                }
                (3, 3) if ash[0] == bsh[0] && ash[2] == bsh[1] => {
                    let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                    let mut c = vec![0.0; bs * m * n];
                    for i in 0..bs {
                        matmul_nn(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &b.data()[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut c[i * m * n..(i + 1) * m * n],
                        );
                    }
                    Array::new(vec![bs, m, n], c).expect("shape")
                }
                (3, 2) if ash[2] == bsh[0] => {
                    let (bs, m, k, n) = (ash[0], ash[1], ash[2], bsh[1]);
                    let mut c = vec![0.0; bs * m * n];
                    matmul_nn(a.data(), b.data(), bs * m, k, n, &mut c);
                    Array::new(vec![bs, m, n], c).expect("shape")
                }
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        detail: format!("{:?} @ {:?}", ash, bsh),
                    })
                }
            };
            (value, nodes[self.id].requires_grad || nodes[other.id].requires_grad)
        };
        self.tape.push("matmul", value, rg, Op::MatMul(self.id, other.id))
    }

    /// Swap the last two axes.
    pub fn t(&self) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            if shape.len() < 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose",
                    detail: format!("rank {} < 2", shape.len()),
                });
            }
            let data = transpose_last2_raw(a.data(), shape);
            let mut new_shape = shape.to_vec();
            let r = new_shape.len();
            new_shape.swap(r - 2, r - 1);
            (Array::new(new_shape, data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape.push("transpose", value, rg, Op::TransposeLast2(self.id))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let n: usize = new_shape.iter().product();
            if n != a.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    detail: format!("{:?} -> {:?}", a.shape(), new_shape),
                });
            }
            (
                Array::new(new_shape.to_vec(), a.data().to_vec()).expect("shape"),
                nodes[self.id].requires_grad,
            )
        };
        self.tape.push("reshape", value, rg, Op::Reshape(self.id))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(TensorError::ShapeMismatch {
                    op: "narrow",
                    detail: format!("axis {} [{}, {}) of {:?}", axis, start, start + len, shape),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut new_shape = shape.to_vec();
            new_shape[axis] = len;
            (Array::new(new_shape, data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape.push("narrow", value, rg, Op::Narrow { input: self.id, axis, start })
    }

    /// Column gather on a 2-D tensor: `out[b, g] = self[b, map[g]]`.
    pub fn gather_cols(&self, map: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            if shape.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_cols",
                    detail: format!("expected rank 2, got {:?}", shape),
                });
            }
            let (rows, cols) = (shape[0], shape[1]);
            if let Some(&bad) = map.iter().find(|&&c| c >= cols) {
                return Err(TensorError::InvalidArg {
                    op: "gather_cols",
                    detail: format!("column {} out of {}", bad, cols),
                });
            }
            let mut data = Vec::with_capacity(rows * map.len());
            for r in 0..rows {
                let row = &a.data()[r * cols..(r + 1) * cols];
                data.extend(map.iter().map(|&c| row[c]));
            }
            (
                Array::new(vec![rows, map.len()], data).expect("shape"),
                nodes[self.id].requires_grad,
            )
        };
        self.tape
            .push("gather_cols", value, rg, Op::GatherCols { input: self.id, map: map.to_vec() })
    }

    /// Row lookup into a 2-D table: `out[i, :] = self[ids[i], :]`.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            if shape.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "select_rows",
                    detail: format!("expected rank 2, got {:?}", shape),
                });
            }
            let (rows, d) = (shape[0], shape[1]);
            if let Some(&bad) = ids.iter().find(|&&r| r >= rows) {
                return Err(TensorError::InvalidArg {
                    op: "select_rows",
                    detail: format!("row {} out of {}", bad, rows),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &r in ids {
                data.extend_from_slice(&a.data()[r * d..(r + 1) * d]);
            }
            (Array::new(vec![ids.len(), d], data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape
            .push("select_rows", value, rg, Op::SelectRows { input: self.id, ids: ids.to_vec() })
    }

    /// Per-row element pick on a 2-D tensor: `out[b] = self[b, ids[b]]`.
    pub fn take_per_row(&self, ids: &[usize]) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            if shape.len() != 2 || ids.len() != shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "take_per_row",
                    detail: format!("{:?} with {} ids", shape, ids.len()),
                });
            }
            let cols = shape[1];
            if let Some(&bad) = ids.iter().find(|&&c| c >= cols) {
                return Err(TensorError::InvalidArg {
                    op: "take_per_row",
                    detail: format!("column {} out of {}", bad, cols),
                });
            }
            let data: Vec<f64> =
                ids.iter().enumerate().map(|(r, &c)| a.data()[r * cols + c]).collect();
            (Array::new(vec![ids.len()], data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape
            .push("take_per_row", value, rg, Op::TakePerRow { input: self.id, ids: ids.to_vec() })
    }

    /// Prepend a batch axis of size `batch`, repeating the input.
    pub fn broadcast_to_batch(&self, batch: usize) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let mut data = Vec::with_capacity(batch * a.numel());
            for _ in 0..batch {
                data.extend_from_slice(a.data());
            }
            let mut shape = vec![batch];
            shape.extend_from_slice(a.shape());
            (Array::new(shape, data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape.push(
            "broadcast_to_batch",
            value,
            rg,
            Op::BroadcastToBatch { input: self.id, batch },
        )
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax(&self) -> Result<Tensor<'t>> {
        self.rowwise("softmax", Op::Softmax, |row, out| {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
            Ok(())
        })
    }

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Tensor<'t>> {
        self.rowwise("log_softmax", Op::LogSoftmax, |row, out| {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = x - lse;
            }
            Ok(())
        })
    }

    /// Scale each row along the last axis to unit L2 norm. A zero row is an
    /// error, not a silent epsilon.
    pub fn l2_normalize(&self) -> Result<Tensor<'t>> {
        self.rowwise("l2_normalize", Op::L2Normalize, |row, out| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroNorm);
            }
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = x / norm;
            }
            Ok(())
        })
    }

    fn rowwise(
        &self,
        name: &'static str,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(&[f64], &mut [f64]) -> Result<()>,
    ) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let shape = a.shape();
            let cols = *shape.last().ok_or(TensorError::ShapeMismatch {
                op: name,
                detail: "rank 0".into(),
            })?;
            let rows = a.numel() / cols;
            let mut data = vec![0.0; a.numel()];
            for r in 0..rows {
                f(&a.data()[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols])?;
            }
            (Array::new(shape.to_vec(), data).expect("shape"), nodes[self.id].requires_grad)
        };
        self.tape.push(name, value, rg, op(self.id))
    }

    /// Layer normalization along the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gamma: Tensor<'t>, beta: Tensor<'t>, eps: f64) -> Result<Tensor<'t>> {
        self.same_tape(&gamma, "layer_norm")?;
        self.same_tape(&beta, "layer_norm")?;
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let cols = *a.shape().last().unwrap_or(&0);
            if g.shape() != [cols] || b.shape() != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!(
                        "gamma {:?} / beta {:?} for features {}",
                        g.shape(),
                        b.shape(),
                        cols
                    ),
                });
            }
            let rows = a.numel() / cols;
            let mut data = vec![0.0; a.numel()];
            for r in 0..rows {
                let row = &a.data()[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    data[r * cols + c] = (row[c] - mean) * inv * g.data()[c] + b.data()[c];
                }
            }
            (
                Array::new(a.shape().to_vec(), data).expect("shape"),
                nodes[self.id].requires_grad
                    || nodes[gamma.id].requires_grad
                    || nodes[beta.id].requires_grad,
            )
        };
        self.tape.push(
            "layer_norm",
            value,
            rg,
            Op::LayerNorm { input: self.id, gamma: gamma.id, beta: beta.id, eps },
        )
    }

    pub fn mean_all(&self) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
            (Array::scalar(mean), nodes[self.id].requires_grad)
        };
        self.tape.push("mean_all", value, rg, Op::MeanAll(self.id))
    }

    pub fn sum_all(&self) -> Result<Tensor<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            (Array::scalar(a.data().iter().sum::<f64>()), nodes[self.id].requires_grad)
        };
        self.tape.push("sum_all", value, rg, Op::SumAll(self.id))
    }
}

/// Concatenate tensors along `axis`. Shapes must agree on all other axes.
pub fn concat<'t>(tensors: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
    let first = tensors.first().ok_or(TensorError::InvalidArg {
        op: "concat",
        detail: "no inputs".into(),
    })?;
    let tape = first.tape;
    for t in tensors {
        first.same_tape(t, "concat")?;
    }
    let (value, rg) = {
        let nodes = tape.nodes.borrow();
        let base_shape = nodes[first.id].value.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                detail: format!("axis {} for rank {}", axis, base_shape.len()),
            });
        }
        let mut total_axis = 0;
        for t in tensors {
            let s = nodes[t.id].value.shape();
            if s.len() != base_shape.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base_shape[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {}", s, base_shape, axis),
                });
            }
            total_axis += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total_axis;
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for t in tensors {
            let s = nodes[t.id].value.shape();
            let len = s[axis];
            let src = nodes[t.id].value.data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let sb = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[sb..sb + len * inner]);
            }
            offset += len;
        }
        (
            Array::new(out_shape, data).expect("shape"),
            tensors.iter().any(|t| nodes[t.id].requires_grad),
        )
    };
    tape.push(
        "concat",
        value,
        rg,
        Op::Concat { inputs: tensors.iter().map(|t| t.id).collect(), axis },
    )
}

/// Max relative error between the analytic gradient of `f` at `point` and a
/// central finite difference with step `h`:
/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Array, h: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, Tensor<'a>) -> Result<Tensor<'a>>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArg { op: "grad_check", detail: "h must be > 0".into() });
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone(), true)?;
        let loss = f(&tape, x)?;
        tape.backward(loss)?;
        x.grad().ok_or(TensorError::InvalidArg {
            op: "grad_check",
            detail: "loss is detached from the input".into(),
        })?
    };

    let eval = |p: &Array| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(p.clone(), false)?;
        let out = f(&tape, x)?;
        let v = out.scalar()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_err = 0.0f64;
    let mut perturbed = point.clone();
    for i in 0..point.numel() {
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + h;
        let fp = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig - h;
        let fm = eval(&perturbed)?;
        perturbed.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
