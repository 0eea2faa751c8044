//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Expressions are built define-by-run: each builder call allocates one
//! immutable node holding its operation, parent handles, and statically
//! inferred output shape. Shape inference is total at construction and
//! panics on misuse; runtime concerns (unbound leaves, binding shape
//! mismatches, non-finite intermediates) surface as errors from
//! evaluation instead.
//!
//! Elementwise binary operations require exact shape equality; mixing
//! shapes goes through an explicit `broadcast_to`, which keeps every
//! gradient reduction visible in the graph.

mod eval;
mod kernels;
mod nn;

pub use eval::{backward_grads, eval_with_grads, finite_diff_grads, forward_eval, forward_eval_many, Bindings, GradMap};
pub use kernels::{conv2d_raw, CONV_KERNEL_SIZES};
pub use nn::{attention_params, layer_norm, multi_head_self_attention, softmax, AttentionParams};

use crate::scalar::Scalar;
use crate::tensor::{broadcast_compatible, numel, TensorBase};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// One operation in the expression graph.
#[derive(Clone)]
pub enum Op<S: Scalar> {
    Leaf { name: String },
    Const(TensorBase<S>),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
    PowConst(f64),
    MaxConst(f64),
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    Broadcast { to: Vec<usize> },
    Reshape { to: Vec<usize> },
    Permute { perm: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    MatMul,
    LogSumExp { axis: usize },
    Conv2d { ksize: usize },
    LogAbsDet,
    Gather { indices: Rc<Vec<usize>>, out: Vec<usize> },
    Scatter { indices: Rc<Vec<usize>>, out: Vec<usize> },
}

impl<S: Scalar> Op<S> {
    /// Short operation name for diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Tanh => "tanh",
            Op::PowConst(_) => "pow_const",
            Op::MaxConst(_) => "max_const",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::MatMul => "matmul",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Conv2d { .. } => "conv2d",
            Op::LogAbsDet => "log_abs_det",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
        }
    }
}

pub struct Node<S: Scalar> {
    id: u64,
    op: Op<S>,
    parents: Vec<ExprBase<S>>,
    shape: Vec<usize>,
}

/// Handle to one node of an expression graph. Cloning is cheap; the
/// graph is an immutable DAG shared through reference counting.
#[derive(Clone)]
pub struct ExprBase<S: Scalar> {
    inner: Rc<Node<S>>,
}

impl<S: Scalar> ExprBase<S> {
    fn make(op: Op<S>, parents: Vec<ExprBase<S>>, shape: Vec<usize>) -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        ExprBase {
            inner: Rc::new(Node {
                id,
                op,
                parents,
                shape,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn op(&self) -> &Op<S> {
        &self.inner.op
    }

    pub fn parents(&self) -> &[ExprBase<S>] {
        &self.inner.parents
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True for shape `[]` or any single-element shape.
    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    // ─── leaf and constant construction ───────────────────────────────

    /// Named trainable or input leaf; values arrive through bindings.
    pub fn leaf(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::make(
            Op::Leaf { name: name.into() },
            vec![],
            shape.to_vec(),
        )
    }

    /// Embedded constant tensor.
    pub fn constant(t: TensorBase<S>) -> Self {
        let shape = t.shape().to_vec();
        Self::make(Op::Const(t), vec![], shape)
    }

    pub fn constant_scalar(v: f64) -> Self {
        Self::constant(TensorBase::scalar(S::of(v)))
    }

    // ─── elementwise arithmetic (exact shape match) ────────────────────

    fn binary(op: Op<S>, a: &Self, b: &Self) -> Self {
        assert_eq!(
            a.shape(),
            b.shape(),
            "{} requires equal shapes, got {:?} vs {:?}; broadcast explicitly",
            op.name(),
            a.shape(),
            b.shape()
        );
        let shape = a.shape().to_vec();
        Self::make(op, vec![a.clone(), b.clone()], shape)
    }

    fn unary(op: Op<S>, a: &Self) -> Self {
        let shape = a.shape().to_vec();
        Self::make(op, vec![a.clone()], shape)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::binary(Op::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::binary(Op::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self::binary(Op::Mul, self, other)
    }

    pub fn div(&self, other: &Self) -> Self {
        Self::binary(Op::Div, self, other)
    }

    pub fn neg(&self) -> Self {
        Self::unary(Op::Neg, self)
    }

    pub fn exp(&self) -> Self {
        Self::unary(Op::Exp, self)
    }

    pub fn log(&self) -> Self {
        Self::unary(Op::Log, self)
    }

    pub fn sigmoid(&self) -> Self {
        Self::unary(Op::Sigmoid, self)
    }

    pub fn softplus(&self) -> Self {
        Self::unary(Op::Softplus, self)
    }

    pub fn tanh(&self) -> Self {
        Self::unary(Op::Tanh, self)
    }

    pub fn pow_const(&self, p: f64) -> Self {
        Self::unary(Op::PowConst(p), self)
    }

    pub fn square(&self) -> Self {
        self.pow_const(2.0)
    }

    /// Elementwise maximum with a constant.
    pub fn max_const(&self, c: f64) -> Self {
        Self::unary(Op::MaxConst(c), self)
    }

    /// Elementwise minimum with a constant: `min(x, c) = −max(−x, −c)`.
    pub fn min_const(&self, c: f64) -> Self {
        self.neg().max_const(-c).neg()
    }

    /// Clamp to `[lo, hi]`; gradient is 1 inside and 0 outside.
    pub fn clamp_const(&self, lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "clamp bounds out of order");
        self.max_const(lo).min_const(hi)
    }

    /// Convenience: add a scalar constant to every element.
    pub fn add_scalar(&self, c: f64) -> Self {
        let cexpr = Self::constant_scalar(c).broadcast_to(self.shape());
        self.add(&cexpr)
    }

    /// Convenience: multiply every element by a scalar constant.
    pub fn mul_scalar(&self, c: f64) -> Self {
        let cexpr = Self::constant_scalar(c).broadcast_to(self.shape());
        self.mul(&cexpr)
    }

    // ─── shape manipulation ────────────────────────────────────────────

    pub fn broadcast_to(&self, to: &[usize]) -> Self {
        if self.shape() == to {
            return self.clone();
        }
        assert!(
            broadcast_compatible(self.shape(), to),
            "cannot broadcast {:?} to {:?}",
            self.shape(),
            to
        );
        Self::make(
            Op::Broadcast { to: to.to_vec() },
            vec![self.clone()],
            to.to_vec(),
        )
    }

    pub fn reshape(&self, to: &[usize]) -> Self {
        assert_eq!(
            numel(to),
            self.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            to
        );
        Self::make(
            Op::Reshape { to: to.to_vec() },
            vec![self.clone()],
            to.to_vec(),
        )
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.ndim(), "permute rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        Self::make(
            Op::Permute {
                perm: perm.to_vec(),
            },
            vec![self.clone()],
            shape,
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(axis < self.ndim(), "slice axis out of range");
        assert!(
            start + len <= self.shape()[axis],
            "slice [{start}, {}) exceeds extent {}",
            start + len,
            self.shape()[axis]
        );
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Self::make(
            Op::Slice { axis, start, len },
            vec![self.clone()],
            shape,
        )
    }

    /// Split along an axis into equal-or-remainder parts at the given
    /// boundaries; a two-way split is `split2`.
    pub fn split2(&self, axis: usize, first_len: usize) -> (Self, Self) {
        let total = self.shape()[axis];
        assert!(first_len <= total, "split point beyond extent");
        (
            self.slice_axis(axis, 0, first_len),
            self.slice_axis(axis, first_len, total - first_len),
        )
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of zero expressions");
        let ndim = parts[0].ndim();
        assert!(axis < ndim, "concat axis out of range");
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        for p in parts {
            assert_eq!(p.ndim(), ndim, "concat rank mismatch");
            for d in 0..ndim {
                if d != axis {
                    assert_eq!(p.shape()[d], shape[d], "concat extent mismatch on dim {d}");
                }
            }
        }
        let parents = parts.iter().map(|p| (*p).clone()).collect();
        Self::make(Op::Concat { axis }, parents, shape)
    }

    // ─── reductions ────────────────────────────────────────────────────

    fn reduced_shape(&self, axes: &[usize]) -> Vec<usize> {
        let mut mask = vec![false; self.ndim()];
        for &a in axes {
            assert!(a < self.ndim(), "axis {a} out of range");
            assert!(!mask[a], "duplicate axis {a}");
            mask[a] = true;
        }
        self.shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !mask[*i])
            .map(|(_, &d)| d)
            .collect()
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Self {
        let shape = self.reduced_shape(axes);
        Self::make(
            Op::Sum {
                axes: axes.to_vec(),
            },
            vec![self.clone()],
            shape,
        )
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Self {
        let shape = self.reduced_shape(axes);
        Self::make(
            Op::Mean {
                axes: axes.to_vec(),
            },
            vec![self.clone()],
            shape,
        )
    }

    pub fn sum_all(&self) -> Self {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.sum_axes(&axes)
    }

    pub fn mean_all(&self) -> Self {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.mean_axes(&axes)
    }

    pub fn logsumexp(&self, axis: usize) -> Self {
        assert!(axis < self.ndim(), "logsumexp axis out of range");
        let shape = self.reduced_shape(&[axis]);
        Self::make(Op::LogSumExp { axis }, vec![self.clone()], shape)
    }

    // ─── structured operations ─────────────────────────────────────────

    pub fn matmul(&self, rhs: &Self) -> Self {
        let shape = match (self.ndim(), rhs.ndim()) {
            (2, 2) => {
                assert_eq!(self.shape()[1], rhs.shape()[0], "matmul inner dims");
                vec![self.shape()[0], rhs.shape()[1]]
            }
            (3, 3) => {
                assert_eq!(self.shape()[0], rhs.shape()[0], "matmul batch dims");
                assert_eq!(self.shape()[2], rhs.shape()[1], "matmul inner dims");
                vec![self.shape()[0], self.shape()[1], rhs.shape()[2]]
            }
            (a, b) => panic!("matmul requires rank 2x2 or 3x3, got {a}x{b}"),
        };
        Self::make(Op::MatMul, vec![self.clone(), rhs.clone()], shape)
    }

    /// 2-D convolution, stride 1, same padding, square kernel of extent
    /// 1 or 3. Input `[N,Cin,H,W]`, kernel `[Cout,Cin,k,k]`; bias (one
    /// per output channel) is applied through broadcast addition.
    pub fn conv2d(&self, kernel: &Self, bias: Option<&Self>) -> Self {
        assert_eq!(self.ndim(), 4, "conv2d input must be [N,Cin,H,W]");
        assert_eq!(kernel.ndim(), 4, "conv2d kernel must be [Cout,Cin,k,k]");
        let (n, cin, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (cout, kcin, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        assert_eq!(kh, kw, "conv2d kernel must be square");
        assert!(
            CONV_KERNEL_SIZES.contains(&kh),
            "unsupported kernel extent {kh}; supported: {CONV_KERNEL_SIZES:?}"
        );
        let conv = Self::make(
            Op::Conv2d { ksize: kh },
            vec![self.clone(), kernel.clone()],
            vec![n, cout, h, w],
        );
        match bias {
            None => conv,
            Some(b) => {
                assert_eq!(b.shape(), &[cout], "conv2d bias must be [Cout]");
                let b4 = b.reshape(&[cout, 1, 1]).broadcast_to(&[n, cout, h, w]);
                conv.add(&b4)
            }
        }
    }

    /// `ln |det M|` of a square matrix, differentiable through the
    /// inverse-transpose adjoint.
    pub fn log_abs_det(&self) -> Self {
        assert!(
            self.ndim() == 2 && self.shape()[0] == self.shape()[1],
            "log_abs_det requires a square matrix, got {:?}",
            self.shape()
        );
        Self::make(Op::LogAbsDet, vec![self.clone()], vec![])
    }

    /// Select elements by flat index into a new shape. Indices are
    /// static per graph; the adjoint is the matching scatter-add.
    pub fn gather(&self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Self {
        assert_eq!(indices.len(), numel(out_shape), "gather index count");
        for &i in indices.iter() {
            assert!(i < self.len(), "gather index {i} out of bounds");
        }
        Self::make(
            Op::Gather {
                indices,
                out: out_shape.to_vec(),
            },
            vec![self.clone()],
            out_shape.to_vec(),
        )
    }

    /// Scatter-add elements by flat index into a zero tensor of
    /// `out_shape`; the adjoint is the matching gather.
    pub fn scatter(&self, indices: Rc<Vec<usize>>, out_shape: &[usize]) -> Self {
        assert_eq!(indices.len(), self.len(), "scatter index count");
        for &i in indices.iter() {
            assert!(i < numel(out_shape), "scatter index {i} out of bounds");
        }
        Self::make(
            Op::Scatter {
                indices,
                out: out_shape.to_vec(),
            },
            vec![self.clone()],
            out_shape.to_vec(),
        )
    }
}

impl<S: Scalar> std::fmt::Debug for ExprBase<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Expr#{}({}){:?}",
            self.id(),
            self.op().name(),
            self.shape()
        )
    }
}

// Operator sugar on references; all elementwise ops require exact
// shape equality, as the named methods do.
impl<S: Scalar> std::ops::Add for &ExprBase<S> {
    type Output = ExprBase<S>;
    fn add(self, rhs: Self) -> ExprBase<S> {
        ExprBase::add(self, rhs)
    }
}

impl<S: Scalar> std::ops::Sub for &ExprBase<S> {
    type Output = ExprBase<S>;
    fn sub(self, rhs: Self) -> ExprBase<S> {
        ExprBase::sub(self, rhs)
    }
}

impl<S: Scalar> std::ops::Mul for &ExprBase<S> {
    type Output = ExprBase<S>;
    fn mul(self, rhs: Self) -> ExprBase<S> {
        ExprBase::mul(self, rhs)
    }
}

impl<S: Scalar> std::ops::Div for &ExprBase<S> {
    type Output = ExprBase<S>;
    fn div(self, rhs: Self) -> ExprBase<S> {
        ExprBase::div(self, rhs)
    }
}

impl<S: Scalar> std::ops::Neg for &ExprBase<S> {
    type Output = ExprBase<S>;
    fn neg(self) -> ExprBase<S> {
        ExprBase::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type E = ExprBase<f64>;

    #[test]
    fn shape_inference_chains_through_builders() {
        let x = E::leaf("x", &[2, 3, 4]);
        assert_eq!(x.sum_axes(&[1]).shape(), &[2, 4]);
        assert_eq!(x.mean_all().shape(), &[] as &[usize]);
        assert_eq!(x.permute(&[2, 0, 1]).shape(), &[4, 2, 3]);
        assert_eq!(x.reshape(&[6, 4]).shape(), &[6, 4]);
        assert_eq!(x.logsumexp(2).shape(), &[2, 3]);
        let y = E::leaf("y", &[2, 3, 4]);
        assert_eq!((&x + &y).shape(), &[2, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "broadcast explicitly")]
    fn mismatched_elementwise_shapes_fail_loudly() {
        let x = E::leaf("x", &[2, 3]);
        let y = E::leaf("y", &[3, 2]);
        let _ = &x + &y;
    }

    #[test]
    #[should_panic(expected = "unsupported kernel extent")]
    fn conv2d_rejects_unsupported_kernels() {
        let x = E::leaf("x", &[1, 2, 4, 4]);
        let k = E::leaf("k", &[2, 2, 5, 5]);
        let _ = x.conv2d(&k, None);
    }

    #[test]
    fn conv2d_shape_preserves_space_and_sets_channels() {
        let x = E::leaf("x", &[2, 3, 5, 6]);
        let k = E::leaf("k", &[7, 3, 3, 3]);
        let b = E::leaf("b", &[7]);
        assert_eq!(x.conv2d(&k, Some(&b)).shape(), &[2, 7, 5, 6]);
    }

    #[test]
    fn node_ids_are_unique() {
        let a = E::leaf("a", &[1]);
        let b = a.exp();
        let c = b.log();
        assert_ne!(a.id(), b.id());
        assert_ne!(b.id(), c.id());
    }
}
