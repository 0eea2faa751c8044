//! Dense row-major tensors with explicit shapes.
//!
//! `TensorBase<S>` owns a contiguous buffer; `product(shape) == data.len()`
//! always holds. A shape of `[]` denotes a scalar (one element). Stored
//! values are expected to be finite; the autodiff engine checks this at
//! every node boundary rather than on construction.

use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Number of elements a shape holds.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> TensorBase<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    /// Scalar tensor: shape `[]`, one element.
    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> S) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            increment_index(&mut idx, shape);
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single element of a scalar-valued tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: S) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        idx.iter()
            .zip(&strides)
            .zip(&self.shape)
            .map(|((&i, &s), &d)| {
                debug_assert!(i < d, "index {} out of bounds for dim {}", i, d);
                i * s
            })
            .sum()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "zip_map shape mismatch {:?} vs {:?}",
            self.shape, other.shape
        );
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    /// Permute axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.ndim(), "permute rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides_of(&self.shape);
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..self.len() {
            let mut src = 0usize;
            for (o, &p) in perm.iter().enumerate() {
                src += idx[o] * in_strides[p];
            }
            out.push(self.data[src]);
            increment_index(&mut idx, &out_shape);
        }
        Self {
            shape: out_shape,
            data: out,
        }
    }

    /// Sum over the given axes; the axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Self {
        self.reduce_axes(axes, false)
    }

    /// Mean over the given axes; the axes are removed from the shape.
    pub fn mean_axes(&self, axes: &[usize]) -> Self {
        self.reduce_axes(axes, true)
    }

    fn reduce_axes(&self, axes: &[usize], mean: bool) -> Self {
        let removed = axis_mask(self.ndim(), axes);
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed[*i])
            .map(|(_, &d)| d)
            .collect();
        let out_strides = strides_of(&out_shape);
        let mut out = vec![S::zero(); numel(&out_shape)];
        let mut idx = vec![0usize; self.ndim()];
        for &v in &self.data {
            let mut o = 0usize;
            let mut k = 0usize;
            for (ax, &i) in idx.iter().enumerate() {
                if !removed[ax] {
                    o += i * out_strides[k];
                    k += 1;
                }
            }
            out[o] += v;
            increment_index(&mut idx, &self.shape);
        }
        if mean {
            let count: usize = self
                .shape
                .iter()
                .enumerate()
                .filter(|(i, _)| removed[*i])
                .map(|(_, &d)| d)
                .product();
            let c = S::of(count as f64);
            for v in &mut out {
                *v /= c;
            }
        }
        Self {
            shape: out_shape,
            data: out,
        }
    }

    /// Log-sum-exp over one axis (removed from the shape), overflow-safe.
    pub fn logsumexp_axis(&self, axis: usize) -> Self {
        assert!(axis < self.ndim(), "logsumexp axis out of range");
        let removed = axis_mask(self.ndim(), &[axis]);
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed[*i])
            .map(|(_, &d)| d)
            .collect();
        let out_strides = strides_of(&out_shape);
        let n_out = numel(&out_shape);
        let mut maxes = vec![S::neg_infinity(); n_out];
        let mut idx = vec![0usize; self.ndim()];
        for &v in &self.data {
            let o = project_index(&idx, &removed, &out_strides);
            if v > maxes[o] {
                maxes[o] = v;
            }
            increment_index(&mut idx, &self.shape);
        }
        let mut sums = vec![S::zero(); n_out];
        let mut idx = vec![0usize; self.ndim()];
        for &v in &self.data {
            let o = project_index(&idx, &removed, &out_strides);
            sums[o] += (v - maxes[o]).exp();
            increment_index(&mut idx, &self.shape);
        }
        let data = maxes
            .into_iter()
            .zip(sums)
            .map(|(m, s)| m + s.ln())
            .collect();
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Materialize a broadcast to `shape` (numpy-style, right-aligned;
    /// each input dim must equal the target dim or be 1).
    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        assert!(
            broadcast_compatible(&self.shape, shape),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        let pad = shape.len() - self.shape.len();
        let in_strides = strides_of(&self.shape);
        let mut out = Vec::with_capacity(numel(shape));
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel(shape) {
            let mut src = 0usize;
            for (i, &d) in self.shape.iter().enumerate() {
                if d != 1 {
                    src += idx[pad + i] * in_strides[i];
                }
            }
            out.push(self.data[src]);
            increment_index(&mut idx, shape);
        }
        Self {
            shape: shape.to_vec(),
            data: out,
        }
    }

    /// Sum a gradient of `shape` back down to this tensor's shape,
    /// undoing `broadcast_to`.
    pub fn reduce_broadcast(grad: &Self, to_shape: &[usize]) -> Self {
        assert!(broadcast_compatible(to_shape, grad.shape()));
        let pad = grad.ndim() - to_shape.len();
        let to_strides = strides_of(to_shape);
        let mut out = vec![S::zero(); numel(to_shape)];
        let mut idx = vec![0usize; grad.ndim()];
        for &v in &grad.data {
            let mut dst = 0usize;
            for (i, &d) in to_shape.iter().enumerate() {
                if d != 1 {
                    dst += idx[pad + i] * to_strides[i];
                }
            }
            out[dst] += v;
            increment_index(&mut idx, grad.shape());
        }
        Self {
            shape: to_shape.to_vec(),
            data: out,
        }
    }

    /// Concatenate tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let ndim = parts[0].ndim();
        assert!(axis < ndim, "concat axis out of range");
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.ndim(), ndim, "concat rank mismatch");
            for d in 0..ndim {
                if d != axis {
                    assert_eq!(p.shape[d], out_shape[d], "concat extent mismatch");
                }
            }
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(axis < self.ndim(), "slice axis out of range");
        assert!(
            start + len <= self.shape[axis],
            "slice [{start}, {}) exceeds extent {}",
            start + len,
            self.shape[axis]
        );
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = (o * self.shape[axis] + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Matrix product. Both operands must be rank 2 (`[m,k] x [k,n]`) or
    /// rank 3 with matching batch (`[b,m,k] x [b,k,n]`).
    pub fn matmul(&self, rhs: &Self) -> Self {
        match (self.ndim(), rhs.ndim()) {
            (2, 2) => {
                let (m, k) = (self.shape[0], self.shape[1]);
                let (k2, n) = (rhs.shape[0], rhs.shape[1]);
                assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
                let mut out = vec![S::zero(); m * n];
                matmul_block(&self.data, &rhs.data, &mut out, m, k, n);
                Self {
                    shape: vec![m, n],
                    data: out,
                }
            }
            (3, 3) => {
                let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
                let (b2, k2, n) = (rhs.shape[0], rhs.shape[1], rhs.shape[2]);
                assert_eq!(b, b2, "matmul batch dims {b} vs {b2}");
                assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
                let mut out = vec![S::zero(); b * m * n];
                for i in 0..b {
                    matmul_block(
                        &self.data[i * m * k..(i + 1) * m * k],
                        &rhs.data[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Self {
                    shape: vec![b, m, n],
                    data: out,
                }
            }
            (a, b) => panic!("matmul requires rank 2x2 or 3x3, got {a}x{b}"),
        }
    }

    /// Gather by flat source indices into a tensor of `out_shape`.
    pub fn gather_flat(&self, indices: &[usize], out_shape: &[usize]) -> Self {
        assert_eq!(indices.len(), numel(out_shape), "gather index count");
        let data = indices
            .iter()
            .map(|&i| {
                assert!(i < self.len(), "gather index {i} out of bounds");
                self.data[i]
            })
            .collect();
        Self {
            shape: out_shape.to_vec(),
            data,
        }
    }

    /// Scatter-add this tensor's elements into a zero tensor of
    /// `out_shape` at the given flat indices.
    pub fn scatter_flat(&self, indices: &[usize], out_shape: &[usize]) -> Self {
        assert_eq!(indices.len(), self.len(), "scatter index count");
        let mut out = vec![S::zero(); numel(out_shape)];
        for (&i, &v) in indices.iter().zip(&self.data) {
            assert!(i < out.len(), "scatter index {i} out of bounds");
            out[i] += v;
        }
        Self {
            shape: out_shape.to_vec(),
            data: out,
        }
    }
}

impl TensorBase<f64> {
    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> std::fmt::Debug for TensorBase<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.len())
        }
    }
}

fn axis_mask(ndim: usize, axes: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; ndim];
    for &a in axes {
        assert!(a < ndim, "axis {a} out of range for rank {ndim}");
        assert!(!mask[a], "duplicate axis {a}");
        mask[a] = true;
    }
    mask
}

fn project_index(idx: &[usize], removed: &[bool], out_strides: &[usize]) -> usize {
    let mut o = 0usize;
    let mut k = 0usize;
    for (ax, &i) in idx.iter().enumerate() {
        if !removed[ax] {
            o += i * out_strides[k];
            k += 1;
        }
    }
    o
}

/// Advance a row-major multi-index by one position.
pub fn increment_index(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

/// True when `from` broadcasts to `to` (right-aligned, 1-extents expand).
pub fn broadcast_compatible(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let pad = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == to[pad + i] || d == 1)
}

fn matmul_block<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = TensorBase<f64>;

    #[test]
    fn shape_and_data_length_agree() {
        let t = T::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert_eq!(numel(t.shape()), t.len());
        let s = T::scalar(5.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.item(), 5.0);
    }

    #[test]
    fn permute_roundtrip() {
        let t = T::from_fn(&[2, 3, 4], |idx| (idx[0] * 100 + idx[1] * 10 + idx[2]) as f64);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn reduce_and_broadcast() {
        let t = T::from_fn(&[2, 3], |idx| (idx[0] * 3 + idx[1]) as f64);
        let s = t.sum_axes(&[1]);
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 12.0]);
        let m = t.mean_axes(&[0, 1]);
        assert_eq!(m.shape(), &[] as &[usize]);
        assert!((m.item() - 2.5).abs() < 1e-15);

        let b = s.broadcast_to(&[4, 2]);
        assert_eq!(b.at(&[3, 1]), 12.0);
        let r = T::reduce_broadcast(&b, &[2]);
        assert_eq!(r.data(), &[12.0, 48.0]);
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let t = T::new(vec![3], vec![700.0, 700.0, 700.0]);
        let l = t.logsumexp_axis(0);
        assert!(l.item().is_finite());
        assert!((l.item() - (700.0 + 3.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = T::from_fn(&[2, 2], |i| (i[0] * 2 + i[1]) as f64);
        let b = T::from_fn(&[2, 3], |i| 10.0 + (i[0] * 3 + i[1]) as f64);
        let c = T::concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.slice_axis(1, 0, 2), a);
        assert_eq!(c.slice_axis(1, 2, 3), b);
    }

    #[test]
    fn matmul_identity() {
        let m = T::from_fn(&[3, 3], |i| (i[0] * 3 + i[1]) as f64 + 1.0);
        let id = T::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        assert_eq!(id.matmul(&m), m);
        let batched = T::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 1.0, 0.0, 0.0, 1.0]);
        let rhs = T::new(vec![2, 2, 1], vec![1.0, 1.0, 5.0, 7.0]);
        let out = batched.matmul(&rhs);
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn gather_scatter_inverse_on_permutation() {
        let t = T::from_fn(&[6], |i| i[0] as f64);
        let idx = [5usize, 3, 1, 0, 2, 4];
        let g = t.gather_flat(&idx, &[6]);
        assert_eq!(g.data(), &[5.0, 3.0, 1.0, 0.0, 2.0, 4.0]);
        let s = g.scatter_flat(&idx, &[6]);
        assert_eq!(s, t);
    }
}
