//! Scalar kernels for logistic mixtures and monotone-function inversion.
//!
//! Everything is computed in log space: `log σ(z) = −softplus(−z)`,
//! `log(1−σ(z)) = −softplus(z)`, and mixtures combine through
//! log-sum-exp, so CDF values can be represented far into both tails
//! without cancellation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mixture log-scales are clamped to `[−7, 7]` before use.
pub const LOG_SCALE_CLAMP: f64 = 7.0;
/// Coupling log-scale outputs `a` are clamped to `[−15, 15]` before use.
pub const AFFINE_CLAMP: f64 = 15.0;
/// Inputs to the logit link are clamped to `[CDF_EPS, 1 − CDF_EPS]`.
pub const CDF_EPS: f64 = 1e-12;
/// Bisection tolerance on the argument.
pub const BISECT_TOL: f64 = 1e-10;
/// Bisection iteration cap; declared failure beyond it.
pub const BISECT_CAP: usize = 200;
/// Initial bracket half-width in units of the largest mixture scale.
pub const BRACKET_SCALES: f64 = 30.0;

/// Largest representable logit under the CDF clamp:
/// `ln(1 − CDF_EPS) − ln(CDF_EPS)`.
pub fn logit_clamp<S: Scalar>() -> S {
    S::of((1.0 - CDF_EPS).ln() - CDF_EPS.ln())
}

pub fn clamp<S: Scalar>(x: S, lo: f64, hi: f64) -> S {
    let lo = S::of(lo);
    let hi = S::of(hi);
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Log-sum-exp of a small slice, overflow-safe.
pub fn logsumexp_slice<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    let sum: S = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Normalized log-weights from unnormalized logits.
pub fn log_softmax_slice<S: Scalar>(logits: &[S]) -> Vec<S> {
    let lse = logsumexp_slice(logits);
    logits.iter().map(|&l| l - lse).collect()
}

/// Per-component standardized arguments `z_i = (x − μ_i)·exp(−s_i)`,
/// with `s` clamped.
fn standardized<S: Scalar>(x: S, means: &[S], log_scales: &[S]) -> Vec<S> {
    means
        .iter()
        .zip(log_scales)
        .map(|(&m, &s)| (x - m) * (-clamp(s, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)).exp())
        .collect()
}

/// `log F(x)` for a K-component logistic mixture:
/// `lse_i[log π_i − softplus(−z_i)]`.
pub fn mixlog_log_cdf<S: Scalar>(x: S, log_pi: &[S], means: &[S], log_scales: &[S]) -> S {
    let zs = standardized(x, means, log_scales);
    let terms: Vec<S> = log_pi
        .iter()
        .zip(&zs)
        .map(|(&lp, &z)| lp + z.log_sigmoid())
        .collect();
    logsumexp_slice(&terms)
}

/// `log (1 − F(x))`: `lse_i[log π_i − softplus(z_i)]`.
pub fn mixlog_log_sf<S: Scalar>(x: S, log_pi: &[S], means: &[S], log_scales: &[S]) -> S {
    let zs = standardized(x, means, log_scales);
    let terms: Vec<S> = log_pi
        .iter()
        .zip(&zs)
        .map(|(&lp, &z)| lp - z.softplus())
        .collect();
    logsumexp_slice(&terms)
}

/// `log f(x)`: `lse_i[log π_i − s_i − softplus(z_i) − softplus(−z_i)]`.
pub fn mixlog_log_pdf<S: Scalar>(x: S, log_pi: &[S], means: &[S], log_scales: &[S]) -> S {
    let zs = standardized(x, means, log_scales);
    let terms: Vec<S> = log_pi
        .iter()
        .zip(&zs)
        .zip(log_scales)
        .map(|((&lp, &z), &s)| {
            lp - clamp(s, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP) - z.softplus() - (-z).softplus()
        })
        .collect();
    logsumexp_slice(&terms)
}

/// The mixture CDF itself, in (0,1).
pub fn mixlog_cdf<S: Scalar>(x: S, log_pi: &[S], means: &[S], log_scales: &[S]) -> S {
    mixlog_log_cdf(x, log_pi, means, log_scales).exp()
}

/// `logit(F(x)) = log F − log(1−F)`, stable in both tails, clamped to
/// the band the CDF clamp allows.
pub fn mixlog_logit_cdf<S: Scalar>(x: S, log_pi: &[S], means: &[S], log_scales: &[S]) -> S {
    let t = mixlog_log_cdf(x, log_pi, means, log_scales)
        - mixlog_log_sf(x, log_pi, means, log_scales);
    let band = logit_clamp::<S>().to_f64_lossy();
    clamp(t, -band, band)
}

/// Initial inversion bracket: `[min μ − 30·max e^s, max μ + 30·max e^s]`.
pub fn mixlog_bracket<S: Scalar>(means: &[S], log_scales: &[S]) -> (S, S) {
    let mu_min = means.iter().fold(S::infinity(), |a, &b| a.min(b));
    let mu_max = means.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let s_max = log_scales
        .iter()
        .map(|&s| clamp(s, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
        .fold(S::neg_infinity(), |a, b| a.max(b));
    let half = S::of(BRACKET_SCALES) * s_max.exp();
    (mu_min - half, mu_max + half)
}

/// Solve `g(x) = target` for strictly increasing `g` by bisection.
/// Terminates when the bracket width drops below `tol`; errors if the
/// target is outside `[g(lo), g(hi)]` or the cap is reached first.
pub fn bisect_increasing<S: Scalar>(
    g: impl Fn(S) -> S,
    target: S,
    mut lo: S,
    mut hi: S,
    tol: f64,
    cap: usize,
) -> Result<S> {
    let (glo, ghi) = (g(lo), g(hi));
    if target < glo || target > ghi {
        return Err(Error::BisectionBracket {
            target: target.to_f64_lossy(),
            lo: glo.to_f64_lossy(),
            hi: ghi.to_f64_lossy(),
        });
    }
    let tol = S::of(tol);
    for _ in 0..cap {
        if hi - lo < tol {
            return Ok((lo + hi) / S::of(2.0));
        }
        let mid = (lo + hi) / S::of(2.0);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::BisectionCap {
        cap,
        width: (hi - lo).to_f64_lossy(),
    })
}

/// Invert the mixture CDF on the logit scale: the `x` with
/// `logit(F(x)) = t`. Bisecting on logits instead of raw CDF values
/// keeps the target representable deep in both tails.
pub fn mixlog_inverse_logit<S: Scalar>(
    t: S,
    log_pi: &[S],
    means: &[S],
    log_scales: &[S],
    tol: f64,
) -> Result<S> {
    let band = logit_clamp::<S>().to_f64_lossy();
    let t = clamp(t, -band, band);
    let (lo, hi) = mixlog_bracket(means, log_scales);
    bisect_increasing(
        |x| mixlog_logit_cdf(x, log_pi, means, log_scales),
        t,
        lo,
        hi,
        tol,
        BISECT_CAP,
    )
}
