//! Reverse-mode differentiation on a Wengert tape.
//!
//! Operations are recorded in forward order; node inputs always precede the
//! node, so replaying the list in reverse visits each node exactly once and
//! accumulates vector-Jacobian products into its inputs. Gradients of shared
//! parameters sum across uses, which weight tying relies on.
//!
//! Every operation checks its output for non-finite values and fails with a
//! `Numeric` error naming the offending node, so NaN/Inf never propagates
//! silently.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Epsilon inside layer-norm's variance square root. Small enough that the
/// normalized output variance stays within 1e-6 of 1 for non-degenerate rows.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Floor on cosine-similarity denominators; zero vectors yield similarity 0.
pub const COSINE_EPS: f64 = 1e-12;

/// Fill value for masked attention scores. Finite on purpose: a fully masked
/// row softmaxes to uniform instead of NaN.
pub const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    Dropout { x: NodeId, mask: Vec<f64> },
    EmbedLookup { table: NodeId, ids: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Transpose(NodeId),
    CosineSim(NodeId, NodeId),
    Scale { x: NodeId, factor: f64 },
    MaskedFill { x: NodeId, mask: Vec<bool> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log-softmax",
            Op::LayerNorm { .. } => "layer-normalize",
            Op::Dropout { .. } => "dropout",
            Op::EmbedLookup { .. } => "embed-lookup",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::CosineSim(..) => "cosine-similarity",
            Op::Scale { .. } => "scalar-scale",
            Op::MaskedFill { .. } => "masked-fill",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The 19 registered primitives, usable through [`Tape::apply`] for generic
/// dispatch. Parameters that are not differentiable inputs (axes, masks,
/// token ids, rates) travel with the primitive itself.
#[derive(Debug, Clone)]
pub enum Primitive {
    Matmul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    LayerNormalize,
    Dropout { rate: f64, seed: u64 },
    EmbedLookup { ids: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Transpose,
    CosineSimilarity,
    ScalarScale { factor: f64 },
    MaskedFill { mask: Vec<bool>, fill: f64 },
    CrossEntropy { targets: Vec<usize>, mask: Vec<bool> },
    Sum,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.is_matrix() && b.is_matrix() {
        if b.rows() == 1 && b.cols() == a.cols() {
            return Ok(Broadcast::Row);
        }
        if b.cols() == 1 && b.rows() == a.rows() {
            return Ok(Broadcast::Col);
        }
    }
    Err(Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

/// out = A (m x k) . B (k x n), row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// out = A^T (k x m) . B (m x n) where A is m x k.
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                let o_row = &mut out[kk * n..(kk + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// out = A (m x n) . B^T (n x k) where B is k x n.
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + kk] = acc;
        }
    }
    out
}

/// Iterate the groups a softmax-style reduction runs over: for axis 1 each
/// row is a group; for axis 0 each column is a group.
fn axis_groups(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    let (rows, cols) = (shape[0], shape[1]);
    match axis {
        1 => (rows, cols, cols, 1), // (groups, group_len, group_stride, elem_stride)
        _ => (cols, rows, 1, cols),
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Record a constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Record a trainable parameter leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {} at node {}",
                op.name(),
                id
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn require_matrix(&self, op: &'static str, id: NodeId) -> Result<()> {
        let t = &self.nodes[id].value;
        if !t.is_matrix() {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_matrix("matmul", a)?;
        self.require_matrix("matmul", b)?;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push(value, Op::Matmul(a, b), self.any_grad(&[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let kind = broadcast_kind("add", ta, tb)?;
        let mut data = ta.data().to_vec();
        apply_broadcast(&mut data, tb, ta.shape(), kind, |x, y| x + y);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), self.any_grad(&[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let kind = broadcast_kind("mul", ta, tb)?;
        let mut data = ta.data().to_vec();
        apply_broadcast(&mut data, tb, ta.shape(), kind, |x, y| x * y);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), self.any_grad(&[a, b]))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.map_unary(x, f64::tanh);
        self.push(value, Op::Tanh(x), self.any_grad(&[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x), self.any_grad(&[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.map_unary(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x), self.any_grad(&[x]))
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.softmax_values(x, axis, false)?;
        self.push(value, Op::Softmax { x, axis }, self.any_grad(&[x]))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let value = self.softmax_values(x, axis, true)?;
        self.push(value, Op::LogSoftmax { x, axis }, self.any_grad(&[x]))
    }

    fn softmax_values(&self, x: NodeId, axis: usize, log: bool) -> Result<Tensor> {
        self.require_matrix("softmax", x)?;
        if axis > 1 {
            return Err(Error::Contract(format!("softmax axis {axis} out of range")));
        }
        let t = &self.nodes[x].value;
        let mut data = t.data().to_vec();
        let (groups, len, gstride, estride) = axis_groups(t.shape(), axis);
        for g in 0..groups {
            if len == 0 {
                continue;
            }
            let base = g * gstride;
            let mut max = f64::NEG_INFINITY;
            for e in 0..len {
                max = max.max(data[base + e * estride]);
            }
            let mut sum = 0.0;
            for e in 0..len {
                sum += (data[base + e * estride] - max).exp();
            }
            let log_sum = sum.ln();
            for e in 0..len {
                let idx = base + e * estride;
                let shifted = data[idx] - max;
                data[idx] = if log {
                    shifted - log_sum
                } else {
                    (shifted - log_sum).exp()
                };
            }
        }
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Normalize each row to zero mean and unit variance. Affine rescaling,
    /// when wanted, is a separate mul/add with parameter tensors.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_matrix("layer-normalize", x)?;
        let t = &self.nodes[x].value;
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            if cols == 0 {
                continue;
            }
            let row = &mut data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let grad = self.any_grad(&[x]);
        self.push(value, Op::LayerNorm { x, inv_std }, grad)
    }

    /// Inverted dropout: kept values are scaled by 1/(1-rate) at train time
    /// so evaluation needs no rescaling. Evaluation simply skips the op.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} not in [0, 1)")));
        }
        let t = &self.nodes[x].value;
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let grad = self.any_grad(&[x]);
        self.push(value, Op::Dropout { x, mask }, grad)
    }

    /// Gather rows of an embedding table. Backward scatter-adds.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.require_matrix("embed-lookup", table)?;
        let t = &self.nodes[table].value;
        let (vocab, dim) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Contract(format!(
                    "embed-lookup id {id} out of range for table with {vocab} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        let grad = self.any_grad(&[table]);
        self.push(
            value,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            grad,
        )
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        for &i in inputs {
            self.require_matrix("concat", i)?;
        }
        let first = self.nodes[inputs[0]].value.shape().to_vec();
        let fixed_axis = 1 - axis;
        let mut along = 0;
        for &i in inputs {
            let s = self.nodes[i].value.shape();
            if s[fixed_axis] != first[fixed_axis] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            along += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = along;
        let mut data = vec![0.0; shape[0] * shape[1]];
        if axis == 0 {
            let mut row0 = 0;
            for &i in inputs {
                let t = &self.nodes[i].value;
                data[row0 * shape[1]..row0 * shape[1] + t.numel()].copy_from_slice(t.data());
                row0 += t.rows();
            }
        } else {
            for r in 0..shape[0] {
                let mut col0 = 0;
                for &i in inputs {
                    let t = &self.nodes[i].value;
                    let c = t.cols();
                    data[r * shape[1] + col0..r * shape[1] + col0 + c]
                        .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                    col0 += c;
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        let grad = self.any_grad(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            grad,
        )
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.require_matrix("slice", x)?;
        if axis > 1 {
            return Err(Error::Contract(format!("slice axis {axis} out of range")));
        }
        let t = &self.nodes[x].value;
        if start + len > t.shape()[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let (value, op) = if axis == 0 {
            let data = t.data()[start * cols..(start + len) * cols].to_vec();
            (
                Tensor::new(vec![len, cols], data)?,
                Op::Slice { x, axis, start },
            )
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
            }
            (
                Tensor::new(vec![rows, len], data)?,
                Op::Slice { x, axis, start },
            )
        };
        let grad = self.any_grad(&[x]);
        self.push(value, op, grad)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.require_matrix("transpose", x)?;
        let t = &self.nodes[x].value;
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = t.data()[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], data)?;
        let grad = self.any_grad(&[x]);
        self.push(value, Op::Transpose(x), grad)
    }

    /// Row-wise cosine similarity of two equally shaped matrices; output is
    /// a column vector. Denominators are floored at [`COSINE_EPS`], so a zero
    /// row yields similarity 0.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_matrix("cosine-similarity", a)?;
        self.require_matrix("cosine-similarity", b)?;
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "cosine-similarity",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows);
        for i in 0..rows {
            let (ra, rb) = (ta.row(i), tb.row(i));
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.push(dot / (na * nb + COSINE_EPS));
        }
        let value = Tensor::new(vec![rows, 1], data)?;
        let grad = self.any_grad(&[a, b]);
        self.push(value, Op::CosineSim(a, b), grad)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let value = self.map_unary(x, |v| v * factor);
        let grad = self.any_grad(&[x]);
        self.push(value, Op::Scale { x, factor }, grad)
    }

    /// Replace masked entries with `fill`; gradients at filled entries are 0.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], fill: f64) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if mask.len() != t.numel() {
            return Err(Error::Contract(format!(
                "masked-fill mask length {} does not match {} elements",
                mask.len(),
                t.numel()
            )));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let grad = self.any_grad(&[x]);
        self.push(
            value,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            grad,
        )
    }

    /// Mean negative log-likelihood over positions where `mask` is true.
    /// Targets at unmasked positions are ignored entirely.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        self.require_matrix("cross-entropy", logits)?;
        let t = &self.nodes[logits].value;
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Contract(format!(
                "cross-entropy expects {rows} targets and mask entries, got {} and {}",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy with empty loss mask".into()));
        }
        let mut total = 0.0;
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::Contract(format!(
                    "cross-entropy target {} out of range for {} classes",
                    targets[i], vocab
                )));
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total -= row[targets[i]] - max - log_sum;
        }
        let value = Tensor::scalar(total / count as f64);
        let grad = self.any_grad(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            grad,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[x].value.data().iter().sum();
        let grad = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), grad)
    }

    /// Generic dispatch over the registered primitive set. Arity mismatches
    /// are contract violations.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        fn arity(prim: &Primitive, inputs: &[NodeId], n: usize) -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "primitive {prim:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        }
        match prim {
            Primitive::Matmul => {
                arity(prim, inputs, 2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                arity(prim, inputs, 2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(prim, inputs, 2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Tanh => {
                arity(prim, inputs, 1)?;
                self.tanh(inputs[0])
            }
            Primitive::Sigmoid => {
                arity(prim, inputs, 1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Relu => {
                arity(prim, inputs, 1)?;
                self.relu(inputs[0])
            }
            Primitive::Softmax { axis } => {
                arity(prim, inputs, 1)?;
                self.softmax(inputs[0], *axis)
            }
            Primitive::LogSoftmax { axis } => {
                arity(prim, inputs, 1)?;
                self.log_softmax(inputs[0], *axis)
            }
            Primitive::LayerNormalize => {
                arity(prim, inputs, 1)?;
                self.layer_norm(inputs[0])
            }
            Primitive::Dropout { rate, seed } => {
                arity(prim, inputs, 1)?;
                let mut rng = Rng::new(*seed);
                self.dropout(inputs[0], *rate, &mut rng)
            }
            Primitive::EmbedLookup { ids } => {
                arity(prim, inputs, 1)?;
                self.embed_lookup(inputs[0], ids)
            }
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, len } => {
                arity(prim, inputs, 1)?;
                self.slice(inputs[0], *axis, *start, *len)
            }
            Primitive::Transpose => {
                arity(prim, inputs, 1)?;
                self.transpose(inputs[0])
            }
            Primitive::CosineSimilarity => {
                arity(prim, inputs, 2)?;
                self.cosine_similarity(inputs[0], inputs[1])
            }
            Primitive::ScalarScale { factor } => {
                arity(prim, inputs, 1)?;
                self.scale(inputs[0], *factor)
            }
            Primitive::MaskedFill { mask, fill } => {
                arity(prim, inputs, 1)?;
                self.masked_fill(inputs[0], mask, *fill)
            }
            Primitive::CrossEntropy { targets, mask } => {
                arity(prim, inputs, 1)?;
                self.cross_entropy(inputs[0], targets, mask)
            }
            Primitive::Sum => {
                arity(prim, inputs, 1)?;
                self.sum(inputs[0])
            }
        }
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// the loss depends on; leaves not on the path have no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = &self.nodes[loss].value;
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::new(
            loss_value.shape().to_vec(),
            vec![1.0; loss_value.numel()],
        )?);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_op(id, &g, &mut grads);
            // Leaves keep their gradient; intermediates were consumed above
            // and may be freed, shared parameters accumulate across uses.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let da = matmul_a_bt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    let db = matmul_at_b(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let kind = broadcast_kind("add", ta, tb).unwrap();
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, reduce_broadcast(g, ta.shape(), tb, kind, None));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let kind = broadcast_kind("mul", ta, tb).unwrap();
                if self.nodes[*a].requires_grad {
                    let mut da = g.data().to_vec();
                    apply_broadcast(&mut da, tb, ta.shape(), kind, |x, y| x * y);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(
                        grads,
                        *b,
                        reduce_broadcast(g, ta.shape(), tb, kind, Some(ta)),
                    );
                }
            }
            Op::Tanh(x) => {
                let y = &self.nodes[id].value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Relu(x) => {
                let input = &self.nodes[*x].value;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(input.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(input.shape().to_vec(), dx).unwrap());
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let mut dx = vec![0.0; y.numel()];
                let (groups, len, gstride, estride) = axis_groups(y.shape(), *axis);
                for gi in 0..groups {
                    let base = gi * gstride;
                    let mut dot = 0.0;
                    for e in 0..len {
                        let idx = base + e * estride;
                        dot += g.data()[idx] * y.data()[idx];
                    }
                    for e in 0..len {
                        let idx = base + e * estride;
                        dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[id].value;
                let mut dx = vec![0.0; y.numel()];
                let (groups, len, gstride, estride) = axis_groups(y.shape(), *axis);
                for gi in 0..groups {
                    let base = gi * gstride;
                    let mut gsum = 0.0;
                    for e in 0..len {
                        gsum += g.data()[base + e * estride];
                    }
                    for e in 0..len {
                        let idx = base + e * estride;
                        dx[idx] = g.data()[idx] - y.data()[idx].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[id].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = vec![0.0; y.numel()];
                for i in 0..rows {
                    if cols == 0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let g_mean = gr.iter().sum::<f64>() / cols as f64;
                    let gy_mean =
                        gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx[i * cols + j] = inv_std[i] * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                let shape = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
            }
            Op::EmbedLookup { table, ids } => {
                let t = &self.nodes[*table].value;
                let dim = t.cols();
                let mut dt = Tensor::zeros(vec![t.rows(), dim]);
                for (pos, &tok) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt.data_mut()[tok * dim + j] += g.data()[pos * dim + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Concat { inputs, axis } => {
                let out_cols = self.nodes[id].value.cols();
                let mut offset = 0;
                for &inp in inputs {
                    let t = &self.nodes[inp].value;
                    let (r, c) = (t.rows(), t.cols());
                    if self.nodes[inp].requires_grad {
                        let mut di = vec![0.0; r * c];
                        if *axis == 0 {
                            di.copy_from_slice(
                                &g.data()[offset * out_cols..offset * out_cols + r * c],
                            );
                        } else {
                            for i in 0..r {
                                di[i * c..(i + 1) * c].copy_from_slice(
                                    &g.data()[i * out_cols + offset..i * out_cols + offset + c],
                                );
                            }
                        }
                        self.accumulate(grads, inp, Tensor::new(vec![r, c], di).unwrap());
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { x, axis, start } => {
                let input = &self.nodes[*x].value;
                let (r, c) = (input.rows(), input.cols());
                let out = &self.nodes[id].value;
                let mut dx = vec![0.0; r * c];
                if *axis == 0 {
                    dx[start * c..start * c + out.numel()].copy_from_slice(g.data());
                } else {
                    let len = out.cols();
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::Transpose(x) => {
                let (r, c) = {
                    let t = &self.nodes[*x].value;
                    (t.rows(), t.cols())
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g.data()[i * r + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::CosineSim(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (rows, d) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; rows * d];
                let mut db = vec![0.0; rows * d];
                for i in 0..rows {
                    let gv = g.data()[i];
                    let (ra, rb) = (ta.row(i), tb.row(i));
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let t = na * nb + COSINE_EPS;
                    for j in 0..d {
                        let mut dai = rb[j] / t;
                        if na > 0.0 {
                            dai -= dot * nb * ra[j] / (na * t * t);
                        }
                        da[i * d + j] = gv * dai;
                        let mut dbi = ra[j] / t;
                        if nb > 0.0 {
                            dbi -= dot * na * rb[j] / (nb * t * t);
                        }
                        db[i * d + j] = gv * dbi;
                    }
                }
                if self.nodes[*a].requires_grad {
                    self.accumulate(grads, *a, Tensor::new(vec![rows, d], da).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    self.accumulate(grads, *b, Tensor::new(vec![rows, d], db).unwrap());
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.data().iter().map(|gv| gv * factor).collect();
                let shape = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
            }
            Op::MaskedFill { x, mask } => {
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(gv, &m)| if m { 0.0 } else { *gv })
                    .collect();
                let shape = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let t = &self.nodes[*logits].value;
                let (rows, vocab) = (t.rows(), t.cols());
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let gv = g.data()[0];
                let mut dx = vec![0.0; rows * vocab];
                for i in 0..rows {
                    if !mask[i] {
                        continue;
                    }
                    let row = t.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..vocab {
                        let p = (row[j] - max).exp() / sum;
                        let indicator = if j == targets[i] { 1.0 } else { 0.0 };
                        dx[i * vocab + j] = gv * (p - indicator) / count;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![rows, vocab], dx).unwrap());
            }
            Op::Sum(x) => {
                let input = &self.nodes[*x].value;
                let gv = g.data()[0];
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(input.shape().to_vec(), vec![gv; input.numel()]).unwrap(),
                );
            }
        }
    }
}

fn apply_broadcast(
    data: &mut [f64],
    b: &Tensor,
    a_shape: &[usize],
    kind: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) {
    match kind {
        Broadcast::Same => {
            for (d, &bv) in data.iter_mut().zip(b.data()) {
                *d = f(*d, bv);
            }
        }
        Broadcast::Scalar => {
            let bv = b.data()[0];
            for d in data.iter_mut() {
                *d = f(*d, bv);
            }
        }
        Broadcast::Row => {
            let cols = a_shape[1];
            for (i, d) in data.iter_mut().enumerate() {
                *d = f(*d, b.data()[i % cols]);
            }
        }
        Broadcast::Col => {
            let cols = a_shape[1];
            for (i, d) in data.iter_mut().enumerate() {
                *d = f(*d, b.data()[i / cols]);
            }
        }
    }
}

/// Reduce an upstream gradient over broadcast dimensions back to `b`'s shape.
/// For mul, the gradient is first weighted by the other operand's values.
fn reduce_broadcast(
    g: &Tensor,
    a_shape: &[usize],
    b: &Tensor,
    kind: Broadcast,
    weight: Option<&Tensor>,
) -> Tensor {
    let weighted = |i: usize| -> f64 {
        match weight {
            Some(w) => g.data()[i] * w.data()[i],
            None => g.data()[i],
        }
    };
    match kind {
        Broadcast::Same => {
            let data: Vec<f64> = (0..g.numel()).map(weighted).collect();
            Tensor::new(b.shape().to_vec(), data).unwrap()
        }
        Broadcast::Scalar => {
            let total: f64 = (0..g.numel()).map(weighted).sum();
            Tensor::new(b.shape().to_vec(), vec![total]).unwrap()
        }
        Broadcast::Row => {
            let cols = a_shape[1];
            let mut out = vec![0.0; cols];
            for i in 0..g.numel() {
                out[i % cols] += weighted(i);
            }
            Tensor::new(b.shape().to_vec(), out).unwrap()
        }
        Broadcast::Col => {
            let cols = a_shape[1];
            let rows = a_shape[0];
            let mut out = vec![0.0; rows];
            for i in 0..g.numel() {
                out[i / cols] += weighted(i);
            }
            Tensor::new(b.shape().to_vec(), out).unwrap()
        }
    }
}

// ---- gradient checking ----------------------------------------------------

/// Evaluate a scalar tape function at the given leaf values.
fn eval_scalar<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.scalar_value())
}

/// Compare analytic gradients against central finite differences at every
/// coordinate of every input. Returns the maximum relative error
/// |analytic - cd| / max(|analytic|, |cd|, 1e-8).
pub fn grad_check<F>(f: &F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_coords(f, points, h, None, &mut Rng::new(0))
}

/// Like [`grad_check`] but probing at most `max_coords` randomly chosen
/// coordinates per input tensor, for functions too large to probe fully.
pub fn grad_check_sampled<F>(
    f: &F,
    points: &[Tensor],
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_coords(f, points, h, Some(max_coords), rng)
}

fn grad_check_coords<F>(
    f: &F,
    points: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check function must be scalar-valued, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut workspace: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let n = point.numel();
        let coords: Vec<usize> = match max_coords {
            Some(cap) if n > cap => {
                let mut picked: Vec<usize> = (0..cap).map(|_| rng.below(n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        for &c in &coords {
            let orig = points[pi].data()[c];
            workspace[pi].data_mut()[c] = orig + h;
            let f_plus = eval_scalar(f, &workspace)?;
            workspace[pi].data_mut()[c] = orig - h;
            let f_minus = eval_scalar(f, &workspace)?;
            workspace[pi].data_mut()[c] = orig;
            let cd = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads.get(ids[pi]).map_or(0.0, |g| g.data()[c]);
            let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
