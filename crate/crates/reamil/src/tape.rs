//! Reverse-mode autodiff on a flat operation tape.
//!
//! Every forward step appends value nodes to an arena and records the op
//! that produced them; [`Tape::backward`] replays the records in reverse,
//! accumulating gradients into the nodes. The op set is exactly what the
//! model needs: dense matmul, row-vector bias, elementwise nonlinearities,
//! per-lane softmax, layer norm, fused cross-entropy, reductions, row
//! concat/slice, and per-row scaling for gated views. No broadcasting
//! beyond these fixed patterns.
//!
//! Gradient-relevant conventions:
//! - `relu` uses subgradient 0 at the kink.
//! - `softmax` and `cross_entropy` subtract the lane max before
//!   exponentiating, so large logits saturate instead of overflowing.
//! - an inference tape (`Tape::inference`) records nothing and marks all
//!   nodes as detached; running the same graph on it yields bit-identical
//!   values to a recording tape.

use thiserror::Error;

use crate::tensor::{Array, Scalar};

/// Handle to a node on a specific tape. Ids are only meaningful on the tape
/// that produced them.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// A value in the graph together with its gradient slot.
#[derive(Debug)]
pub struct TensorNode<T> {
    value: Array<T>,
    requires_grad: bool,
    grad: Option<Array<T>>,
}

impl<T: Scalar> TensorNode<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn grad(&self) -> Option<&Array<T>> {
        self.grad.as_ref()
    }
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: rows {start}..{} out of range for {rows} rows", start + count)]
    SliceOutOfRange {
        op: &'static str,
        start: usize,
        count: usize,
        rows: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: loss node is detached from all differentiable inputs")]
    DetachedLoss,
    #[error("backward: gradients already populated; reset with zero_grads first")]
    BackwardAlreadyRun,
}

type Result<V> = std::result::Result<V, AutodiffError>;

enum Op<T> {
    MatMul { a: NodeId, b: NodeId, out: NodeId },
    Transpose { x: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    AddRowVec { x: NodeId, v: NodeId, out: NodeId },
    ScaleConst { x: NodeId, c: T, out: NodeId },
    Recip { x: NodeId, out: NodeId },
    Sigmoid { x: NodeId, out: NodeId },
    Relu { x: NodeId, out: NodeId },
    Gelu { x: NodeId, out: NodeId },
    Softmax { x: NodeId, axis: usize, out: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, out: NodeId },
    CrossEntropy { logits: NodeId, label: usize, out: NodeId },
    Sum { x: NodeId, out: NodeId },
    Mean { x: NodeId, out: NodeId },
    ConcatRows { parts: Vec<NodeId>, out: NodeId },
    SliceRows { x: NodeId, start: usize, count: usize, out: NodeId },
    BroadcastScale { weights: NodeId, x: NodeId, out: NodeId },
    ExpandScalar { s: NodeId, n: usize, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
}

/// Wengert list: an arena of nodes plus the op records that connect them.
pub struct Tape<T> {
    nodes: Vec<TensorNode<T>>,
    ops: Vec<Op<T>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Non-recording tape: same arithmetic, no op records, all nodes
    /// detached. Used for evaluation passes.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        self.push(value, false)
    }

    pub fn scalar_const(&mut self, v: T) -> NodeId {
        self.constant(Array::scalar(v))
    }

    /// Differentiable leaf. On an inference tape it is silently detached.
    pub fn param(&mut self, value: Array<T>) -> NodeId {
        let rg = self.grad_enabled;
        self.push(value, rg)
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Array<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(TensorNode {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array<T>, inputs: &[NodeId], op: impl FnOnce(NodeId) -> Op<T>) -> NodeId {
        let rg = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let out = self.push(value, rg);
        if rg {
            self.ops.push(op(out));
        }
        out
    }

    // ---- ops ----

    /// `a (m,k) @ b (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Array::from_vec([m, n], matmul_fwd(av.data(), bv.data(), m, k, n));
        Ok(self.push_op(out, &[a, b], |out| Op::MatMul { a, b, out }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let out = Array::from_vec([n, m], transpose_raw(xv.data(), m, n));
        Ok(self.push_op(out, &[x], |out| Op::Transpose { x, out }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(out, &[a, b], |out| Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same_shape("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(out, &[a, b], |out| Op::Sub { a, b, out }))
    }

    /// Elementwise product of same-shape operands.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(out, &[a, b], |out| Op::Mul { a, b, out }))
    }

    /// Adds a length-`c` vector to every row of an `(n,c)` matrix.
    pub fn add_rowvec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xv, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        if xv.rank() != 2 || vv.rank() != 1 || xv.shape()[1] != vv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_rowvec",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = xv.data().to_vec();
        for r in 0..n {
            for j in 0..c {
                data[r * c + j] = data[r * c + j] + vv.data()[j];
            }
        }
        let out = Array::from_vec([n, c], data);
        Ok(self.push_op(out, &[x, v], |out| Op::AddRowVec { x, v, out }))
    }

    /// Multiplies every element by a compile-time constant (not a node).
    pub fn scale_const(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let out = self.nodes[x.0].value.map(|v| v * c);
        Ok(self.push_op(out, &[x], |out| Op::ScaleConst { x, c, out }))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.nodes[x.0].value.map(|v| T::one() / v);
        Ok(self.push_op(out, &[x], |out| Op::Recip { x, out }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.nodes[x.0].value.map(sigmoid_stable);
        Ok(self.push_op(out, &[x], |out| Op::Sigmoid { x, out }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push_op(out, &[x], |out| Op::Relu { x, out }))
    }

    /// Tanh-approximation GELU; smooth everywhere, which keeps finite
    /// differences clean in gradient checks.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.nodes[x.0].value.map(gelu_fwd);
        Ok(self.push_op(out, &[x], |out| Op::Gelu { x, out }))
    }

    /// Softmax along `axis`, independently per lane, max-subtracted.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank().max(1) {
            return Err(AutodiffError::InvalidAxis {
                op: "softmax",
                axis,
                rank: xv.rank(),
            });
        }
        if xv.numel() == 0 {
            return Err(AutodiffError::EmptyInput { op: "softmax" });
        }
        let mut data = xv.data().to_vec();
        for_each_lane(xv.shape(), axis, |idx| {
            let maxv = idx.iter().map(|&i| data[i]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for &i in idx {
                let e = (data[i] - maxv).exp();
                data[i] = e;
                denom = denom + e;
            }
            for &i in idx {
                data[i] = data[i] / denom;
            }
        });
        let out = Array::from_vec(xv.shape().to_vec(), data);
        Ok(self.push_op(out, &[x], |out| Op::Softmax { x, axis, out }))
    }

    /// Per-row layer norm over the trailing axis with learned gain and bias.
    /// `x` is `(n,d)` or `(d)`; `gain` and `bias` are `(d)`. Epsilon 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = xv.cols();
        if xv.rank() > 2 || gv.shape() != [d] || bv.shape() != [d] || d == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut data = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let (mean, var) = mean_var(row);
            let inv = T::one() / (var + layer_norm_eps::<T>()).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mean) * inv;
                data[r * d + j] = gv.data()[j] * xhat + bv.data()[j];
            }
        }
        let out = Array::from_vec(xv.shape().to_vec(), data);
        Ok(self.push_op(out, &[x, gain, bias], |out| Op::LayerNorm { x, gain, bias, out }))
    }

    /// Fused softmax + negative log-likelihood of `label`. `logits` is a
    /// rank-1 vector of class scores; the result is a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 1 || lv.numel() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        if label >= lv.numel() {
            return Err(AutodiffError::LabelOutOfRange {
                label,
                classes: lv.numel(),
            });
        }
        let loss = Array::scalar(log_sum_exp(lv.data()) - lv.data()[label]);
        Ok(self.push_op(loss, &[logits], |out| Op::CrossEntropy { logits, label, out }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let mut acc = T::zero();
        for &v in xv.data() {
            acc = acc + v;
        }
        Ok(self.push_op(Array::scalar(acc), &[x], |out| Op::Sum { x, out }))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() == 0 {
            return Err(AutodiffError::EmptyInput { op: "mean" });
        }
        let n = T::from_count(xv.numel());
        let mut acc = T::zero();
        for &v in xv.data() {
            acc = acc + v;
        }
        Ok(self.push_op(Array::scalar(acc / n), &[x], |out| Op::Mean { x, out }))
    }

    /// Stacks rank-2 parts with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat_rows" });
        }
        let cols = self.nodes[parts[0].0].value.shape().get(1).copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rank() != 2 || pv.shape()[1] != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Array::from_vec([rows, cols], data);
        let parts = parts.to_vec();
        Ok(self.push_op(out, &parts.clone(), |out| Op::ConcatRows { parts, out }))
    }

    /// Contiguous slice along axis 0 (rows of a matrix, elements of a vector).
    pub fn slice_rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let rows = match xv.rank() {
            1 => xv.shape()[0],
            2 => xv.shape()[0],
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "slice_rows",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![],
                })
            }
        };
        if start + count > rows || count == 0 {
            return Err(AutodiffError::SliceOutOfRange {
                op: "slice_rows",
                start,
                count,
                rows,
            });
        }
        let width = if xv.rank() == 2 { xv.shape()[1] } else { 1 };
        let data = xv.data()[start * width..(start + count) * width].to_vec();
        let shape = if xv.rank() == 2 {
            vec![count, width]
        } else {
            vec![count]
        };
        let out = Array::from_vec(shape, data);
        Ok(self.push_op(out, &[x], |out| Op::SliceRows { x, start, count, out }))
    }

    /// Scales row `i` of `x (n,c)` by `weights[i]`. This is how gate vectors
    /// act on feature matrices and positional terms.
    pub fn broadcast_scale(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        let (wv, xv) = (&self.nodes[weights.0].value, &self.nodes[x.0].value);
        if wv.rank() != 1 || xv.rank() != 2 || wv.shape()[0] != xv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_scale",
                lhs: wv.shape().to_vec(),
                rhs: xv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = xv.data().to_vec();
        for i in 0..n {
            let w = wv.data()[i];
            for j in 0..c {
                data[i * c + j] = data[i * c + j] * w;
            }
        }
        let out = Array::from_vec([n, c], data);
        Ok(self.push_op(out, &[weights, x], |out| Op::BroadcastScale { weights, x, out }))
    }

    /// Fills a length-`n` vector with a scalar node's value.
    pub fn expand_scalar(&mut self, s: NodeId, n: usize) -> Result<NodeId> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 || n == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "expand_scalar",
                lhs: sv.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let out = Array::full([n], sv.scalar_value());
        Ok(self.push_op(out, &[s], |out| Op::ExpandScalar { s, n, out }))
    }

    /// Reinterprets the same elements under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        let xv = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Array::from_vec(shape, xv.data().to_vec());
        Ok(self.push_op(out, &[x], |out| Op::Reshape { x, out }))
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Array<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Array::from_vec(av.shape().to_vec(), data))
    }

    /// Clears all gradient slots so another backward pass may run.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node with
    /// `requires_grad` (zeros for nodes the loss does not depend on).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if !loss_node.requires_grad {
            return Err(AutodiffError::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for op in self.ops.iter().rev() {
            apply_backward(op, &self.nodes, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.grad = Some(Array::from_vec(node.value.shape().to_vec(), data));
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

fn layer_norm_eps<T: Scalar>() -> T {
    T::from_f64(1e-5)
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_count(row.len());
    let mut mean = T::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var / n)
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let maxv = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut acc = T::zero();
    for &v in xs {
        acc = acc + (v - maxv).exp();
    }
    maxv + acc.ln()
}

fn matmul_fwd<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// `g (m,n) @ b^T (n,k read as k,n) -> (m,k)`; used for dA in matmul.
fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + grow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `a^T (k,m read as m,k) @ g (m,n) -> (k,n)`; used for dB in matmul.
fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * grow[j];
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Calls `f` with the flat indices of each lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    // Rank-0/rank-1 degenerate to a single lane over all elements.
    let shape = if shape.is_empty() { &[1usize][..] } else { shape };
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * len * stride + s;
            for (t, slot) in idx.iter_mut().enumerate() {
                *slot = base + t * stride;
            }
            f(&idx);
        }
    }
}

fn accum<T: Scalar>(slot: &mut Option<Vec<T>>, numel: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); numel])
}

fn apply_backward<T: Scalar>(op: &Op<T>, nodes: &[TensorNode<T>], grads: &mut Vec<Option<Vec<T>>>) {
    // Each arm: read the output grad (absent means the loss does not depend
    // on this op), then accumulate into inputs that require grad.
    macro_rules! out_grad {
        ($out:expr) => {
            match &grads[$out.0] {
                Some(g) => g.clone(),
                None => return,
            }
        };
    }
    let needs = |id: NodeId| nodes[id.0].requires_grad;
    let val = |id: NodeId| nodes[id.0].value.data();

    match op {
        Op::MatMul { a, b, out } => {
            let g = out_grad!(out);
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if needs(*a) {
                let da = matmul_nt(&g, val(*b), m, n, k);
                let slot = accum(&mut grads[a.0], m * k);
                for (s, d) in slot.iter_mut().zip(da) {
                    *s = *s + d;
                }
            }
            if needs(*b) {
                let db = matmul_tn(val(*a), &g, m, k, n);
                let slot = accum(&mut grads[b.0], k * n);
                for (s, d) in slot.iter_mut().zip(db) {
                    *s = *s + d;
                }
            }
        }
        Op::Transpose { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            // out is (n,m); transposing its grad returns to (m,n).
            let gt = transpose_raw(&g, n, m);
            let slot = accum(&mut grads[x.0], m * n);
            for (s, d) in slot.iter_mut().zip(gt) {
                *s = *s + d;
            }
        }
        Op::Add { a, b, out } => {
            let g = out_grad!(out);
            for id in [a, b] {
                if needs(*id) {
                    let slot = accum(&mut grads[id.0], g.len());
                    for (s, &d) in slot.iter_mut().zip(&g) {
                        *s = *s + d;
                    }
                }
            }
        }
        Op::Sub { a, b, out } => {
            let g = out_grad!(out);
            if needs(*a) {
                let slot = accum(&mut grads[a.0], g.len());
                for (s, &d) in slot.iter_mut().zip(&g) {
                    *s = *s + d;
                }
            }
            if needs(*b) {
                let slot = accum(&mut grads[b.0], g.len());
                for (s, &d) in slot.iter_mut().zip(&g) {
                    *s = *s - d;
                }
            }
        }
        Op::Mul { a, b, out } => {
            let g = out_grad!(out);
            if needs(*a) {
                let bv = val(*b).to_vec();
                let slot = accum(&mut grads[a.0], g.len());
                for ((s, &d), &bx) in slot.iter_mut().zip(&g).zip(&bv) {
                    *s = *s + d * bx;
                }
            }
            if needs(*b) {
                let av = val(*a).to_vec();
                let slot = accum(&mut grads[b.0], g.len());
                for ((s, &d), &ax) in slot.iter_mut().zip(&g).zip(&av) {
                    *s = *s + d * ax;
                }
            }
        }
        Op::AddRowVec { x, v, out } => {
            let g = out_grad!(out);
            let (n, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            if needs(*x) {
                let slot = accum(&mut grads[x.0], n * c);
                for (s, &d) in slot.iter_mut().zip(&g) {
                    *s = *s + d;
                }
            }
            if needs(*v) {
                let slot = accum(&mut grads[v.0], c);
                for r in 0..n {
                    for j in 0..c {
                        slot[j] = slot[j] + g[r * c + j];
                    }
                }
            }
        }
        Op::ScaleConst { x, c, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let slot = accum(&mut grads[x.0], g.len());
            for (s, &d) in slot.iter_mut().zip(&g) {
                *s = *s + d * *c;
            }
        }
        Op::Recip { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let y = val(*out).to_vec();
            let slot = accum(&mut grads[x.0], g.len());
            for ((s, &d), &yv) in slot.iter_mut().zip(&g).zip(&y) {
                *s = *s - d * yv * yv;
            }
        }
        Op::Sigmoid { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let y = val(*out).to_vec();
            let slot = accum(&mut grads[x.0], g.len());
            for ((s, &d), &yv) in slot.iter_mut().zip(&g).zip(&y) {
                *s = *s + d * yv * (T::one() - yv);
            }
        }
        Op::Relu { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let xv = val(*x).to_vec();
            let slot = accum(&mut grads[x.0], g.len());
            for ((s, &d), &xx) in slot.iter_mut().zip(&g).zip(&xv) {
                if xx > T::zero() {
                    *s = *s + d;
                }
            }
        }
        Op::Gelu { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let xv = val(*x).to_vec();
            let slot = accum(&mut grads[x.0], g.len());
            for ((s, &d), &xx) in slot.iter_mut().zip(&g).zip(&xv) {
                *s = *s + d * gelu_grad(xx);
            }
        }
        Op::Softmax { x, axis, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let y = val(*out).to_vec();
            let shape = nodes[out.0].value.shape().to_vec();
            let mut dx = vec![T::zero(); y.len()];
            for_each_lane(&shape, *axis, |idx| {
                let mut dot = T::zero();
                for &i in idx {
                    dot = dot + g[i] * y[i];
                }
                for &i in idx {
                    dx[i] = y[i] * (g[i] - dot);
                }
            });
            let slot = accum(&mut grads[x.0], dx.len());
            for (s, d) in slot.iter_mut().zip(dx) {
                *s = *s + d;
            }
        }
        Op::LayerNorm { x, gain, bias, out } => {
            let g = out_grad!(out);
            let xv = nodes[x.0].value.clone();
            let d = xv.cols();
            let rows = xv.rows();
            let gainv = val(*gain).to_vec();
            let inv_d = T::one() / T::from_count(d);
            let mut dx = vec![T::zero(); xv.numel()];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let (mean, var) = mean_var(row);
                let inv = T::one() / (var + layer_norm_eps::<T>()).sqrt();
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * inv;
                    dxhat[j] = grow[j] * gainv[j];
                    dgain[j] = dgain[j] + grow[j] * xhat[j];
                    dbias[j] = dbias[j] + grow[j];
                    mean_dxhat = mean_dxhat + dxhat[j];
                    mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
                }
                mean_dxhat = mean_dxhat * inv_d;
                mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                for j in 0..d {
                    dx[r * d + j] = (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv;
                }
            }
            if needs(*x) {
                let slot = accum(&mut grads[x.0], dx.len());
                for (s, dv) in slot.iter_mut().zip(dx) {
                    *s = *s + dv;
                }
            }
            if needs(*gain) {
                let slot = accum(&mut grads[gain.0], d);
                for (s, dv) in slot.iter_mut().zip(dgain) {
                    *s = *s + dv;
                }
            }
            if needs(*bias) {
                let slot = accum(&mut grads[bias.0], d);
                for (s, dv) in slot.iter_mut().zip(dbias) {
                    *s = *s + dv;
                }
            }
        }
        Op::CrossEntropy { logits, label, out } => {
            if !needs(*logits) {
                return;
            }
            let g = out_grad!(out)[0];
            let lv = val(*logits);
            let maxv = lv.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            let mut probs: Vec<T> = lv.iter().map(|&v| (v - maxv).exp()).collect();
            for &p in &probs {
                denom = denom + p;
            }
            for p in &mut probs {
                *p = *p / denom;
            }
            let slot = accum(&mut grads[logits.0], lv.len());
            for (j, s) in slot.iter_mut().enumerate() {
                let onehot = if j == *label { T::one() } else { T::zero() };
                *s = *s + g * (probs[j] - onehot);
            }
        }
        Op::Sum { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out)[0];
            let numel = nodes[x.0].value.numel();
            let slot = accum(&mut grads[x.0], numel);
            for s in slot.iter_mut() {
                *s = *s + g;
            }
        }
        Op::Mean { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out)[0];
            let numel = nodes[x.0].value.numel();
            let d = g / T::from_count(numel);
            let slot = accum(&mut grads[x.0], numel);
            for s in slot.iter_mut() {
                *s = *s + d;
            }
        }
        Op::ConcatRows { parts, out } => {
            let g = out_grad!(out);
            let mut offset = 0;
            for &p in parts {
                let numel = nodes[p.0].value.numel();
                if needs(p) {
                    let slot = accum(&mut grads[p.0], numel);
                    for (s, &d) in slot.iter_mut().zip(&g[offset..offset + numel]) {
                        *s = *s + d;
                    }
                }
                offset += numel;
            }
        }
        Op::SliceRows { x, start, count, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let xv = &nodes[x.0].value;
            let width = if xv.rank() == 2 { xv.shape()[1] } else { 1 };
            let slot = accum(&mut grads[x.0], xv.numel());
            for (i, &d) in g.iter().enumerate() {
                slot[start * width + i] = slot[start * width + i] + d;
            }
            let _ = count;
        }
        Op::BroadcastScale { weights, x, out } => {
            let g = out_grad!(out);
            let (n, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            if needs(*weights) {
                let xv = val(*x).to_vec();
                let slot = accum(&mut grads[weights.0], n);
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..c {
                        acc = acc + g[i * c + j] * xv[i * c + j];
                    }
                    slot[i] = slot[i] + acc;
                }
            }
            if needs(*x) {
                let wv = val(*weights).to_vec();
                let slot = accum(&mut grads[x.0], n * c);
                for i in 0..n {
                    for j in 0..c {
                        slot[i * c + j] = slot[i * c + j] + g[i * c + j] * wv[i];
                    }
                }
            }
        }
        Op::ExpandScalar { s, n, out } => {
            if !needs(*s) {
                return;
            }
            let g = out_grad!(out);
            let mut acc = T::zero();
            for &d in &g {
                acc = acc + d;
            }
            let slot = accum(&mut grads[s.0], 1);
            slot[0] = slot[0] + acc;
            let _ = n;
        }
        Op::Reshape { x, out } => {
            if !needs(*x) {
                return;
            }
            let g = out_grad!(out);
            let slot = accum(&mut grads[x.0], g.len());
            for (s, &d) in slot.iter_mut().zip(&g) {
                *s = *s + d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t64() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = t64();
        let a = tape.constant(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let eye = tape.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = t64();
        let a = tape.constant(Array::zeros([2, 3]));
        let b = tape.constant(Array::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_matches_hand_values() {
        let mut tape = t64();
        let x = tape.constant(Array::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert_relative_eq!(v[0], 0.0900, epsilon = 1e-4);
        assert_relative_eq!(v[1], 0.2447, epsilon = 1e-4);
        assert_relative_eq!(v[2], 0.6652, epsilon = 1e-4);
        let sum: f64 = v.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_each_sum_to_one() {
        let mut tape = t64();
        let x = tape.constant(Array::from_rows(&[vec![5.0, 1.0, -3.0], vec![0.0, 0.0, 0.0]]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| v.get2(r, c)).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(v.get2(1, 0), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = t64();
        let x = tape.constant(Array::vector(vec![0.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
    }

    #[test]
    fn layer_norm_of_constant_row_returns_bias() {
        let mut tape = t64();
        let x = tape.constant(Array::from_rows(&[vec![3.0, 3.0, 3.0, 3.0]]));
        let gain = tape.constant(Array::vector(vec![2.0, 2.0, 2.0, 2.0]));
        let bias = tape.constant(Array::vector(vec![0.5, -0.5, 1.5, 0.0]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for (o, b) in tape.value(y).data().iter().zip([0.5, -0.5, 1.5, 0.0]) {
            assert_relative_eq!(*o, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn broadcast_scale_with_ones_is_identity() {
        let mut tape = t64();
        let w = tape.constant(Array::vector(vec![1.0, 1.0]));
        let x = tape.constant(Array::from_rows(&[vec![1.0, -2.0], vec![0.25, 9.0]]));
        let y = tape.broadcast_scale(w, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn cross_entropy_uniform_two_class_is_ln_two() {
        let mut tape = t64();
        let logits = tape.constant(Array::vector(vec![0.0, 0.0]));
        let loss = tape.cross_entropy(logits, 0).unwrap();
        assert_relative_eq!(tape.value(loss).scalar_value(), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_not_overflows() {
        let mut tape = t64();
        let logits = tape.constant(Array::vector(vec![10.0, -10.0]));
        let loss = tape.cross_entropy(logits, 0).unwrap();
        let v = tape.value(loss).scalar_value();
        assert!(v >= 0.0 && v < 1e-8, "{v}");

        let mut tape = t64();
        let logits = tape.constant(Array::vector(vec![1e4, -1e4]));
        let loss = tape.cross_entropy(logits, 1).unwrap();
        assert!(tape.value(loss).scalar_value().is_finite());
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = t64();
        let logits = tape.param(Array::vector(vec![1.0, 2.0, 3.0]));
        let loss = tape.cross_entropy(logits, 1).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap().data();
        assert_relative_eq!(g[0], 0.0900, epsilon = 1e-4);
        assert_relative_eq!(g[1], 0.2447 - 1.0, epsilon = 1e-4);
        assert_relative_eq!(g[2], 0.6652, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range_is_reported() {
        let mut tape = t64();
        let logits = tape.constant(Array::vector(vec![0.0, 0.0]));
        let err = tape.cross_entropy(logits, 2).unwrap_err();
        assert!(matches!(err, AutodiffError::LabelOutOfRange { label: 2, classes: 2 }));
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = t64();
        let x = tape.param(Array::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn second_backward_without_reset_errors_then_reset_allows_it() {
        let mut tape = t64();
        let x = tape.param(Array::vector(vec![2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(AutodiffError::BackwardAlreadyRun)
        ));
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = t64();
        let x = tape.param(Array::vector(vec![1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn detached_loss_is_rejected() {
        let mut tape = t64();
        let x = tape.constant(Array::vector(vec![1.0]));
        let loss = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(loss), Err(AutodiffError::DetachedLoss)));
    }

    #[test]
    fn unused_params_get_zero_grads_after_backward() {
        let mut tape = t64();
        let x = tape.param(Array::vector(vec![1.0]));
        let unused = tape.param(Array::vector(vec![5.0, 6.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_across_shared_use() {
        // loss = sum(x + x) -> dx = 2 per element.
        let mut tape = t64();
        let x = tape.param(Array::vector(vec![3.0, 4.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn inference_tape_matches_recording_tape_bitwise() {
        let run = |tape: &mut Tape<f64>| {
            let x = tape.param(Array::vector(vec![0.3, -1.7, 2.9]));
            let s = tape.softmax(x, 0).unwrap();
            let g = tape.gelu(s).unwrap();
            let loss = tape.mean(g).unwrap();
            tape.value(loss).scalar_value()
        };
        let a = run(&mut Tape::new());
        let b = run(&mut Tape::inference());
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn relu_subgradient_at_kink_is_zero() {
        let mut tape = t64();
        let x = tape.param(Array::vector(vec![0.0, -1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = t64();
        let x = tape.param(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let rest = tape.slice_rows(x, 1, 2).unwrap();
        let back = tape.concat_rows(&[top, rest]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let loss = tape.sum(back).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn slice_out_of_range_is_reported() {
        let mut tape = t64();
        let x = tape.constant(Array::zeros([3, 2]));
        let err = tape.slice_rows(x, 2, 2).unwrap_err();
        assert!(matches!(err, AutodiffError::SliceOutOfRange { .. }));
    }

    #[test]
    fn expand_scalar_gradient_sums_contributions() {
        let mut tape = t64();
        let s = tape.param(Array::scalar(2.0));
        let v = tape.expand_scalar(s, 4).unwrap();
        let loss = tape.sum(v).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[4.0]);
    }
}
