//! Evaluation and differentiation of expression graphs.
//!
//! `forward_eval` walks the DAG once in topological order, memoizing
//! node values by id and checking every intermediate for finiteness.
//! `backward_grads` reuses the same forward sweep, then pushes
//! cotangents through each node's adjoint rule in reverse order.
//! `finite_diff_grads` is the independent central-difference oracle.

use super::kernels::conv2d_adjoints;
use super::{conv2d_raw, ExprBase, Op};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use std::collections::{HashMap, HashSet};

pub type Bindings<S> = HashMap<String, TensorBase<S>>;
pub type GradMap<S> = HashMap<String, TensorBase<S>>;

/// Evaluate a single expression under the given leaf bindings.
pub fn forward_eval<S: Scalar>(root: &ExprBase<S>, bindings: &Bindings<S>) -> Result<TensorBase<S>> {
    Ok(forward_eval_many(std::slice::from_ref(root), bindings)?
        .pop()
        .expect("one root, one value"))
}

/// Evaluate several expressions that may share structure; every shared
/// node is computed exactly once.
pub fn forward_eval_many<S: Scalar>(
    roots: &[ExprBase<S>],
    bindings: &Bindings<S>,
) -> Result<Vec<TensorBase<S>>> {
    let order = topo_order(roots);
    let mut values: HashMap<u64, TensorBase<S>> = HashMap::with_capacity(order.len());
    for node in &order {
        let v = eval_node(node, &values, bindings)?;
        if !v.all_finite() {
            return Err(Error::NonFinite {
                node: node.id(),
                op: node.op().name().to_string(),
            });
        }
        values.insert(node.id(), v);
    }
    Ok(roots
        .iter()
        .map(|r| values[&r.id()].clone())
        .collect())
}

/// Reverse-mode gradients of a scalar-valued expression with respect to
/// the named leaves. Gradients of a leaf bound at several graph nodes
/// with one name accumulate.
pub fn backward_grads<S: Scalar>(
    root: &ExprBase<S>,
    bindings: &Bindings<S>,
    wrt: &[&str],
) -> Result<GradMap<S>> {
    Ok(eval_with_grads(root, bindings, wrt)?.1)
}

/// Forward value and reverse-mode gradients in one pass.
pub fn eval_with_grads<S: Scalar>(
    root: &ExprBase<S>,
    bindings: &Bindings<S>,
    wrt: &[&str],
) -> Result<(TensorBase<S>, GradMap<S>)> {
    if !root.is_scalar() {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let order = topo_order(std::slice::from_ref(root));

    let mut leaf_nodes: HashMap<&str, Vec<(u64, Vec<usize>)>> = HashMap::new();
    for node in &order {
        if let Op::Leaf { name } = node.op() {
            leaf_nodes
                .entry(name.as_str())
                .or_default()
                .push((node.id(), node.shape().to_vec()));
        }
    }
    for &name in wrt {
        if !leaf_nodes.contains_key(name) {
            return Err(Error::LeafNotFound(name.to_string()));
        }
    }

    let mut values: HashMap<u64, TensorBase<S>> = HashMap::with_capacity(order.len());
    for node in &order {
        let v = eval_node(node, &values, bindings)?;
        if !v.all_finite() {
            return Err(Error::NonFinite {
                node: node.id(),
                op: node.op().name().to_string(),
            });
        }
        values.insert(node.id(), v);
    }

    let mut adjoints: HashMap<u64, TensorBase<S>> = HashMap::new();
    adjoints.insert(root.id(), TensorBase::ones(root.shape()));

    for node in order.iter().rev() {
        let g = match adjoints.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        propagate(node, &g, &values, &mut adjoints)?;
    }

    let mut grads = GradMap::new();
    for &name in wrt {
        let nodes = &leaf_nodes[name];
        let mut total: Option<TensorBase<S>> = None;
        for (id, shape) in nodes {
            let part = adjoints
                .get(id)
                .cloned()
                .unwrap_or_else(|| TensorBase::zeros(shape));
            total = Some(match total {
                None => part,
                Some(t) => t.zip_map(&part, |a, b| a + b),
            });
        }
        grads.insert(name.to_string(), total.expect("leaf list nonempty"));
    }
    let value = values[&root.id()].clone();
    Ok((value, grads))
}

/// Central-difference gradients `(f(x+h) − f(x−h)) / 2h`, coordinate by
/// coordinate. Verification oracle only; cost scales with leaf size.
pub fn finite_diff_grads<S: Scalar>(
    root: &ExprBase<S>,
    bindings: &Bindings<S>,
    wrt: &[&str],
    step: f64,
) -> Result<GradMap<S>> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if !root.is_scalar() {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let h = S::of(step);
    let two_h = S::of(2.0 * step);
    let mut grads = GradMap::new();
    for &name in wrt {
        let base = bindings
            .get(name)
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?
            .clone();
        let mut work = bindings.clone();
        let mut grad = TensorBase::zeros(base.shape());
        for i in 0..base.len() {
            let orig = base.data()[i];
            let probe = |v: S, work: &mut Bindings<S>| -> Result<S> {
                let mut t = base.clone();
                t.data_mut()[i] = v;
                work.insert(name.to_string(), t);
                Ok(forward_eval(root, work)?.item())
            };
            let fp = probe(orig + h, &mut work)?;
            let fm = probe(orig - h, &mut work)?;
            grad.data_mut()[i] = (fp - fm) / two_h;
        }
        work.insert(name.to_string(), base);
        grads.insert(name.to_string(), grad);
    }
    Ok(grads)
}

// ─── graph traversal ───────────────────────────────────────────────────

fn topo_order<S: Scalar>(roots: &[ExprBase<S>]) -> Vec<ExprBase<S>> {
    let mut order = Vec::new();
    let mut done: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(ExprBase<S>, usize)> =
        roots.iter().rev().map(|r| (r.clone(), 0)).collect();
    while let Some((node, child)) = stack.pop() {
        if done.contains(&node.id()) {
            continue;
        }
        if child < node.parents().len() {
            let parent = node.parents()[child].clone();
            stack.push((node, child + 1));
            if !done.contains(&parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            done.insert(node.id());
            order.push(node);
        }
    }
    order
}

// ─── forward rules ─────────────────────────────────────────────────────

fn eval_node<S: Scalar>(
    node: &ExprBase<S>,
    values: &HashMap<u64, TensorBase<S>>,
    bindings: &Bindings<S>,
) -> Result<TensorBase<S>> {
    let pv = |i: usize| &values[&node.parents()[i].id()];
    let out = match node.op() {
        Op::Leaf { name } => {
            let v = bindings
                .get(name)
                .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
            if v.shape() != node.shape() {
                return Err(Error::Shape(format!(
                    "leaf {name:?} declared {:?} but bound {:?}",
                    node.shape(),
                    v.shape()
                )));
            }
            v.clone()
        }
        Op::Const(t) => t.clone(),
        Op::Add => pv(0).zip_map(pv(1), |a, b| a + b),
        Op::Sub => pv(0).zip_map(pv(1), |a, b| a - b),
        Op::Mul => pv(0).zip_map(pv(1), |a, b| a * b),
        Op::Div => pv(0).zip_map(pv(1), |a, b| a / b),
        Op::Neg => pv(0).map(|a| -a),
        Op::Exp => pv(0).map(|a| a.exp()),
        Op::Log => pv(0).map(|a| a.ln()),
        Op::Sigmoid => pv(0).map(|a| a.sigmoid()),
        Op::Softplus => pv(0).map(|a| a.softplus()),
        Op::Tanh => pv(0).map(|a| a.tanh()),
        Op::PowConst(p) => {
            let p = S::of(*p);
            pv(0).map(|a| a.powf(p))
        }
        Op::MaxConst(c) => {
            let c = S::of(*c);
            pv(0).map(|a| a.max(c))
        }
        Op::Sum { axes } => pv(0).sum_axes(axes),
        Op::Mean { axes } => pv(0).mean_axes(axes),
        Op::Broadcast { to } => pv(0).broadcast_to(to),
        Op::Reshape { to } => pv(0).reshape(to),
        Op::Permute { perm } => pv(0).permute(perm),
        Op::Concat { axis } => {
            let parts: Vec<&TensorBase<S>> = (0..node.parents().len()).map(pv).collect();
            TensorBase::concat(&parts, *axis)
        }
        Op::Slice { axis, start, len } => pv(0).slice_axis(*axis, *start, *len),
        Op::MatMul => pv(0).matmul(pv(1)),
        Op::LogSumExp { axis } => pv(0).logsumexp_axis(*axis),
        Op::Conv2d { .. } => conv2d_raw(pv(0), pv(1)),
        Op::LogAbsDet => TensorBase::scalar(linalg::log_abs_det(pv(0))?),
        Op::Gather { indices, out } => pv(0).gather_flat(indices, out),
        Op::Scatter { indices, out } => pv(0).scatter_flat(indices, out),
    };
    debug_assert_eq!(
        out.shape(),
        node.shape(),
        "op {} produced a shape differing from inference",
        node.op().name()
    );
    Ok(out)
}

// ─── adjoint rules ─────────────────────────────────────────────────────

fn propagate<S: Scalar>(
    node: &ExprBase<S>,
    g: &TensorBase<S>,
    values: &HashMap<u64, TensorBase<S>>,
    adjoints: &mut HashMap<u64, TensorBase<S>>,
) -> Result<()> {
    let parents = node.parents();
    let pv = |i: usize| &values[&parents[i].id()];
    let y = || &values[&node.id()];
    let mut acc = |i: usize, delta: TensorBase<S>| {
        let id = parents[i].id();
        match adjoints.get_mut(&id) {
            Some(t) => *t = t.zip_map(&delta, |a, b| a + b),
            None => {
                adjoints.insert(id, delta);
            }
        }
    };
    match node.op() {
        Op::Leaf { .. } | Op::Const(_) => {}
        Op::Add => {
            acc(0, g.clone());
            acc(1, g.clone());
        }
        Op::Sub => {
            acc(0, g.clone());
            acc(1, g.map(|v| -v));
        }
        Op::Mul => {
            acc(0, g.zip_map(pv(1), |g, b| g * b));
            acc(1, g.zip_map(pv(0), |g, a| g * a));
        }
        Op::Div => {
            acc(0, g.zip_map(pv(1), |g, b| g / b));
            let gy = g.zip_map(y(), |g, y| g * y);
            acc(1, gy.zip_map(pv(1), |gy, b| -gy / b));
        }
        Op::Neg => acc(0, g.map(|v| -v)),
        Op::Exp => acc(0, g.zip_map(y(), |g, y| g * y)),
        Op::Log => acc(0, g.zip_map(pv(0), |g, a| g / a)),
        Op::Sigmoid => acc(0, g.zip_map(y(), |g, y| g * y * (S::one() - y))),
        Op::Softplus => acc(0, g.zip_map(pv(0), |g, a| g * a.sigmoid())),
        Op::Tanh => acc(0, g.zip_map(y(), |g, y| g * (S::one() - y * y))),
        Op::PowConst(p) => {
            let p = S::of(*p);
            acc(
                0,
                g.zip_map(pv(0), move |g, a| g * p * a.powf(p - S::one())),
            );
        }
        Op::MaxConst(c) => {
            let c = S::of(*c);
            acc(
                0,
                g.zip_map(pv(0), move |g, a| if a > c { g } else { S::zero() }),
            );
        }
        Op::Sum { axes } => acc(0, expand_reduced(g, pv(0).shape(), axes)),
        Op::Mean { axes } => {
            let count: usize = axes.iter().map(|&a| pv(0).shape()[a]).product();
            let scale = S::one() / S::of(count as f64);
            acc(0, expand_reduced(g, pv(0).shape(), axes).map(|v| v * scale));
        }
        Op::Broadcast { .. } => acc(0, TensorBase::reduce_broadcast(g, pv(0).shape())),
        Op::Reshape { .. } => acc(0, g.reshape(pv(0).shape())),
        Op::Permute { perm } => {
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            acc(0, g.permute(&inv));
        }
        Op::Concat { axis } => {
            let mut start = 0usize;
            for i in 0..parents.len() {
                let len = pv(i).shape()[*axis];
                acc(i, g.slice_axis(*axis, start, len));
                start += len;
            }
        }
        Op::Slice { axis, start, .. } => {
            acc(0, embed_slice(g, pv(0).shape(), *axis, *start));
        }
        Op::MatMul => {
            let (a, b) = (pv(0), pv(1));
            if a.ndim() == 2 {
                acc(0, g.matmul(&b.permute(&[1, 0])));
                acc(1, a.permute(&[1, 0]).matmul(g));
            } else {
                acc(0, g.matmul(&b.permute(&[0, 2, 1])));
                acc(1, a.permute(&[0, 2, 1]).matmul(g));
            }
        }
        Op::LogSumExp { axis } => {
            let expanded_y = expand_reduced(y(), pv(0).shape(), &[*axis]);
            let soft = pv(0).zip_map(&expanded_y, |a, m| (a - m).exp());
            let expanded_g = expand_reduced(g, pv(0).shape(), &[*axis]);
            acc(0, soft.zip_map(&expanded_g, |s, g| s * g));
        }
        Op::Conv2d { .. } => {
            let (d_in, d_k) = conv2d_adjoints(pv(0), pv(1), g);
            acc(0, d_in);
            acc(1, d_k);
        }
        Op::LogAbsDet => {
            let inv_t = linalg::inverse(pv(0))?.permute(&[1, 0]);
            let gs = g.item();
            acc(0, inv_t.map(|v| v * gs));
        }
        Op::Gather { indices, .. } => {
            acc(0, g.scatter_flat(indices, pv(0).shape()));
        }
        Op::Scatter { indices, .. } => {
            acc(0, g.gather_flat(indices, pv(0).shape()));
        }
    }
    Ok(())
}

/// Reinsert reduced axes as extent-1 dims, then broadcast back to the
/// parent shape: the adjoint expansion for sum/mean/logsumexp.
fn expand_reduced<S: Scalar>(
    g: &TensorBase<S>,
    parent_shape: &[usize],
    axes: &[usize],
) -> TensorBase<S> {
    let mut with_ones = parent_shape.to_vec();
    for &a in axes {
        with_ones[a] = 1;
    }
    g.reshape(&with_ones).broadcast_to(parent_shape)
}

/// Embed a slice cotangent into a zero tensor of the parent's shape.
fn embed_slice<S: Scalar>(
    g: &TensorBase<S>,
    parent_shape: &[usize],
    axis: usize,
    start: usize,
) -> TensorBase<S> {
    let mut out = TensorBase::zeros(parent_shape);
    let outer: usize = parent_shape[..axis].iter().product();
    let inner: usize = parent_shape[axis + 1..].iter().product();
    let slice_len = g.shape()[axis];
    let gd = g.data();
    let od = out.data_mut();
    for o in 0..outer {
        let src = o * slice_len * inner;
        let dst = (o * parent_shape[axis] + start) * inner;
        od[dst..dst + slice_len * inner].copy_from_slice(&gd[src..src + slice_len * inner]);
    }
    out
}
