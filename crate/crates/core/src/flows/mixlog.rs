//! Elementwise coupling transforms: the logistic-mixture-CDF transform
//! and the plain affine transform, in both tensor form (direct loops
//! over values, used by sampling, inversion, and verification) and
//! graph form (autodiff expressions, used by training).
//!
//! The mixture transform of a value `x` under per-element parameters
//! (logits π̃, means μ, log-scales s, log-scale a, shift b) is
//!
//! `y = logit(F(x)) · exp(a) + b`,  `F = MixLogCDF(x; π, μ, s)`,
//!
//! with per-element log-Jacobian `log f(x) − log F − log(1−F) + a`.
//! All CDF arithmetic stays in log space; the logit is clamped to the
//! band that keeps `σ⁻¹` inputs within `[1e-12, 1−1e-12]`.
//!
//! Parameter layout produced by conditioning networks, raw shape
//! `[N, C·(3K+2), H, W]`: for each data channel `c`, the `3K+2`
//! consecutive channels hold K logits, K means, K log-scales, then `a`
//! and `b`. Affine rawshape is `[N, 2C, H, W]`: `a` then `b` per data
//! channel.

use crate::error::{Error, Result};
use crate::math::{
    self, clamp, logit_clamp, mixlog_inverse_logit, AFFINE_CLAMP, LOG_SCALE_CLAMP,
};
use crate::{Expr, Tensor};

/// Channels of raw network output needed per data channel.
pub fn mixlog_param_channels(k: usize) -> usize {
    3 * k + 2
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [N,C,H,W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Per-element parameter views for one (n, c, h, w) position.
struct MixlogAt<'a> {
    raw: &'a Tensor,
    k: usize,
    c: usize,
    hw: usize,
}

impl<'a> MixlogAt<'a> {
    fn new(raw: &'a Tensor, k: usize, c: usize, h: usize, w: usize) -> Self {
        let (_, rc, rh, rw) = dims4(raw);
        assert_eq!(rc, c * mixlog_param_channels(k), "raw channel count");
        assert_eq!((rh, rw), (h, w), "raw spatial extents");
        MixlogAt {
            raw,
            k,
            c,
            hw: h * w,
        }
    }

    /// Parameter `p` of data channel `c` at batch `n`, position `pos`.
    fn at(&self, n: usize, c: usize, p: usize, pos: usize) -> f64 {
        let pc = mixlog_param_channels(self.k);
        let ch = c * pc + p;
        self.raw.data()[(n * self.c * pc + ch) * self.hw + pos]
    }

    fn fill(&self, n: usize, c: usize, pos: usize, buf: &mut MixlogBufs) {
        for i in 0..self.k {
            buf.logits[i] = self.at(n, c, i, pos);
            buf.means[i] = self.at(n, c, self.k + i, pos);
            buf.log_scales[i] = clamp(
                self.at(n, c, 2 * self.k + i, pos),
                -LOG_SCALE_CLAMP,
                LOG_SCALE_CLAMP,
            );
        }
        buf.a = clamp(self.at(n, c, 3 * self.k, pos), -AFFINE_CLAMP, AFFINE_CLAMP);
        buf.b = self.at(n, c, 3 * self.k + 1, pos);
        let lse = math::logsumexp_slice(&buf.logits);
        for i in 0..self.k {
            buf.log_pi[i] = buf.logits[i] - lse;
        }
    }
}

struct MixlogBufs {
    logits: Vec<f64>,
    means: Vec<f64>,
    log_scales: Vec<f64>,
    log_pi: Vec<f64>,
    a: f64,
    b: f64,
}

impl MixlogBufs {
    fn new(k: usize) -> Self {
        MixlogBufs {
            logits: vec![0.0; k],
            means: vec![0.0; k],
            log_scales: vec![0.0; k],
            log_pi: vec![0.0; k],
            a: 0.0,
            b: 0.0,
        }
    }
}

/// Dense forward transform of every element of `x` under the mixture
/// parameters in `raw`. Returns the transformed tensor and the
/// per-element log-Jacobian. `active_mask`, shaped `[C,H,W]` with 1
/// marking elements the coupling actually transforms, scopes the
/// saturation check: an active element whose CDF reaches the clamp
/// bounds signals parameter blow-up.
pub fn mixlog_forward_t(
    x: &Tensor,
    raw: &Tensor,
    k: usize,
    active_mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = dims4(x);
    let params = MixlogAt::new(raw, k, c, h, w);
    let mut buf = MixlogBufs::new(k);
    let band = logit_clamp::<f64>();
    let mut y = Tensor::zeros(x.shape());
    let mut ld = Tensor::zeros(x.shape());
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for pos in 0..h * w {
                let flat = (ni * c + ci) * h * w + pos;
                params.fill(ni, ci, pos, &mut buf);
                let xv = xd[flat];
                let log_f = math::mixlog_log_cdf(xv, &buf.log_pi, &buf.means, &buf.log_scales);
                let log_sf = math::mixlog_log_sf(xv, &buf.log_pi, &buf.means, &buf.log_scales);
                let log_pdf = math::mixlog_log_pdf(xv, &buf.log_pi, &buf.means, &buf.log_scales);
                let t_raw = log_f - log_sf;
                if t_raw.abs() >= band {
                    let is_active = active_mask
                        .map(|m| m.data()[ci * h * w + pos] != 0.0)
                        .unwrap_or(true);
                    if is_active {
                        return Err(Error::ParamBlowUp(format!(
                            "mixture CDF saturated at element (n={ni}, c={ci}, pos={pos}): \
                             logit {t_raw:.3e} beyond ±{band:.3e}"
                        )));
                    }
                }
                let t = clamp(t_raw, -band, band);
                y.data_mut()[flat] = t * buf.a.exp() + buf.b;
                ld.data_mut()[flat] = log_pdf - log_f - log_sf + buf.a;
            }
        }
    }
    Ok((y, ld))
}

/// Invert the dense mixture transform elementwise by bisection.
pub fn mixlog_inverse_t(y: &Tensor, raw: &Tensor, k: usize, tol: f64) -> Result<Tensor> {
    let (n, c, h, w) = dims4(y);
    let params = MixlogAt::new(raw, k, c, h, w);
    let mut buf = MixlogBufs::new(k);
    let mut x = Tensor::zeros(y.shape());
    let yd = y.data();
    for ni in 0..n {
        for ci in 0..c {
            for pos in 0..h * w {
                let flat = (ni * c + ci) * h * w + pos;
                params.fill(ni, ci, pos, &mut buf);
                let t = (yd[flat] - buf.b) * (-buf.a).exp();
                x.data_mut()[flat] =
                    mixlog_inverse_logit(t, &buf.log_pi, &buf.means, &buf.log_scales, tol)?;
            }
        }
    }
    Ok(x)
}

/// Dense affine transform `y = x·exp(a) + b` with per-element
/// log-Jacobian `a` (clamped).
pub fn affine_forward_t(x: &Tensor, raw: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = dims4(x);
    let (_, rc, _, _) = dims4(raw);
    assert_eq!(rc, 2 * c, "affine raw channel count");
    let mut y = Tensor::zeros(x.shape());
    let mut ld = Tensor::zeros(x.shape());
    let xd = x.data();
    let rd = raw.data();
    for ni in 0..n {
        for ci in 0..c {
            for pos in 0..h * w {
                let flat = (ni * c + ci) * h * w + pos;
                let a = clamp(
                    rd[(ni * 2 * c + 2 * ci) * h * w + pos],
                    -AFFINE_CLAMP,
                    AFFINE_CLAMP,
                );
                let b = rd[(ni * 2 * c + 2 * ci + 1) * h * w + pos];
                y.data_mut()[flat] = xd[flat] * a.exp() + b;
                ld.data_mut()[flat] = a;
            }
        }
    }
    (y, ld)
}

/// Invert the dense affine transform.
pub fn affine_inverse_t(y: &Tensor, raw: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(y);
    let mut x = Tensor::zeros(y.shape());
    let yd = y.data();
    let rd = raw.data();
    for ni in 0..n {
        for ci in 0..c {
            for pos in 0..h * w {
                let flat = (ni * c + ci) * h * w + pos;
                let a = clamp(
                    rd[(ni * 2 * c + 2 * ci) * h * w + pos],
                    -AFFINE_CLAMP,
                    AFFINE_CLAMP,
                );
                let b = rd[(ni * 2 * c + 2 * ci + 1) * h * w + pos];
                x.data_mut()[flat] = (yd[flat] - b) * (-a).exp();
            }
        }
    }
    x
}

/// Graph form of the dense mixture transform; same math as
/// `mixlog_forward_t`, built from autodiff primitives. Returns
/// `(y, per-element log-Jacobian)`, both shaped like `x`.
pub fn mixlog_forward_expr(x: &Expr, raw: &Expr, k: usize) -> (Expr, Expr) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(
        raw.shape(),
        &[n, c * mixlog_param_channels(k), h, w],
        "raw parameter shape"
    );
    let grouped = raw.reshape(&[n, c, mixlog_param_channels(k), h, w]);
    let logits = grouped.slice_axis(2, 0, k);
    let means = grouped.slice_axis(2, k, k);
    let log_scales = grouped
        .slice_axis(2, 2 * k, k)
        .clamp_const(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
    let a = grouped
        .slice_axis(2, 3 * k, 1)
        .reshape(&[n, c, h, w])
        .clamp_const(-AFFINE_CLAMP, AFFINE_CLAMP);
    let b = grouped.slice_axis(2, 3 * k + 1, 1).reshape(&[n, c, h, w]);

    let kshape = [n, c, k, h, w];
    let expand_k = |e: &Expr| e.reshape(&[n, c, 1, h, w]).broadcast_to(&kshape);
    let log_pi = logits.sub(&expand_k(&logits.logsumexp(2)));
    let xk = expand_k(&x.reshape(&[n, c, h, w]));
    let z = xk.sub(&means).mul(&log_scales.neg().exp());

    // log σ(z) = −softplus(−z);  log(1−σ(z)) = −softplus(z)
    let log_f = log_pi.sub(&z.neg().softplus()).logsumexp(2);
    let log_sf = log_pi.sub(&z.softplus()).logsumexp(2);
    let log_pdf = log_pi
        .sub(&log_scales)
        .sub(&z.softplus())
        .sub(&z.neg().softplus())
        .logsumexp(2);

    let band = logit_clamp::<f64>();
    let t = log_f.sub(&log_sf).clamp_const(-band, band);
    let y = t.mul(&a.exp()).add(&b);
    let ld = log_pdf.sub(&log_f).sub(&log_sf).add(&a);
    (y, ld)
}

/// Graph form of the dense affine transform.
pub fn affine_forward_expr(x: &Expr, raw: &Expr) -> (Expr, Expr) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(raw.shape(), &[n, 2 * c, h, w], "affine raw shape");
    let grouped = raw.reshape(&[n, c, 2, h, w]);
    let a = grouped
        .slice_axis(2, 0, 1)
        .reshape(&[n, c, h, w])
        .clamp_const(-AFFINE_CLAMP, AFFINE_CLAMP);
    let b = grouped.slice_axis(2, 1, 1).reshape(&[n, c, h, w]);
    let y = x.mul(&a.exp()).add(&b);
    (y, a)
}
