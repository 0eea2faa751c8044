//! Small dense linear algebra: LU factorization with partial pivoting,
//! exact log-absolute-determinants, inverses, and random orthogonal
//! matrices. Everything here works on square row-major matrices; sizes
//! are channel counts, so O(n^3) direct loops are appropriate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use rand::Rng;
use rand_distr::StandardNormal;

/// Pivot magnitudes below this are treated as singular.
pub const PIVOT_EPS: f64 = 1e-12;

/// Packed LU factorization of a square matrix: `P A = L U` with unit
/// lower-triangular `L` below the diagonal and `U` on and above it.
pub struct Lu<S> {
    packed: Vec<S>,
    perm: Vec<usize>,
    n: usize,
}

/// Factor a square rank-2 tensor. Fails with `SingularMatrix` if any
/// pivot magnitude drops below `PIVOT_EPS`.
pub fn lu_factor<S: Scalar>(m: &TensorBase<S>) -> Result<Lu<S>> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!(
            "lu_factor expects a square matrix, got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let mut a = m.data().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut best = col;
        let mut best_mag = a[col * n + col].abs();
        for row in col + 1..n {
            let mag = a[row * n + col].abs();
            if mag > best_mag {
                best = row;
                best_mag = mag;
            }
        }
        if best_mag.to_f64_lossy() < PIVOT_EPS {
            return Err(Error::SingularMatrix {
                pivot: best_mag.to_f64_lossy(),
                col,
            });
        }
        if best != col {
            for j in 0..n {
                a.swap(col * n + j, best * n + j);
            }
            perm.swap(col, best);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            a[row * n + col] = factor;
            for j in col + 1..n {
                let sub = factor * a[col * n + j];
                a[row * n + j] -= sub;
            }
        }
    }
    Ok(Lu { packed: a, perm, n })
}

impl<S: Scalar> Lu<S> {
    /// `ln |det A|`, exact up to rounding: the sum of log pivot magnitudes.
    pub fn log_abs_det(&self) -> S {
        let mut acc = S::zero();
        for i in 0..self.n {
            acc += self.packed[i * self.n + i].abs().ln();
        }
        acc
    }

    /// Solve `A x = b` for one right-hand side.
    pub fn solve_vec(&self, b: &[S]) -> Vec<S> {
        assert_eq!(b.len(), self.n, "solve_vec length mismatch");
        let n = self.n;
        let mut x: Vec<S> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            for j in 0..i {
                let sub = self.packed[i * n + j] * x[j];
                x[i] -= sub;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let sub = self.packed[i * n + j] * x[j];
                x[i] -= sub;
            }
            x[i] /= self.packed[i * n + i];
        }
        x
    }

    /// Dense inverse, column by column.
    pub fn inverse(&self) -> TensorBase<S> {
        let n = self.n;
        let mut out = vec![S::zero(); n * n];
        let mut e = vec![S::zero(); n];
        for col in 0..n {
            e[col] = S::one();
            let x = self.solve_vec(&e);
            e[col] = S::zero();
            for row in 0..n {
                out[row * n + col] = x[row];
            }
        }
        TensorBase::new(vec![n, n], out)
    }
}

/// `ln |det m|` for a square rank-2 tensor.
pub fn log_abs_det<S: Scalar>(m: &TensorBase<S>) -> Result<S> {
    Ok(lu_factor(m)?.log_abs_det())
}

/// Dense inverse of a square rank-2 tensor.
pub fn inverse<S: Scalar>(m: &TensorBase<S>) -> Result<TensorBase<S>> {
    Ok(lu_factor(m)?.inverse())
}

/// Random orthogonal matrix: QR of a standard-normal matrix with the
/// sign convention diag(R) > 0. `|det| = 1`, so its log-determinant
/// contribution is exactly zero.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> TensorBase<f64> {
    assert!(n > 0, "random_orthogonal needs n > 0");
    let mut a: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    // Modified Gram-Schmidt with a second orthogonalization pass; ample
    // for channel-count sizes.
    let mut q = vec![0.0f64; n * n];
    for col in 0..n {
        let mut v: Vec<f64> = (0..n).map(|row| a[row * n + col]).collect();
        for _pass in 0..2 {
            for prev in 0..col {
                let dot: f64 = (0..n).map(|row| q[row * n + prev] * v[row]).sum();
                for row in 0..n {
                    v[row] -= dot * q[row * n + prev];
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Degenerate draw; replace the column and redo it.
            for row in 0..n {
                a[row * n + col] = rng.sample(StandardNormal);
            }
            return random_orthogonal_retry(n, a, rng);
        }
        let sign_dot: f64 = (0..n).map(|row| v[row] * a[row * n + col]).sum();
        let flip = if sign_dot < 0.0 { -1.0 } else { 1.0 };
        for row in 0..n {
            q[row * n + col] = flip * v[row] / norm;
        }
    }
    TensorBase::new(vec![n, n], q)
}

fn random_orthogonal_retry(n: usize, _a: Vec<f64>, rng: &mut impl Rng) -> TensorBase<f64> {
    random_orthogonal(n, rng)
}
