//! Discrete data and its conversion to continuous training targets.
//!
//! Integer-valued data of bit depth `b` is modeled through a continuous
//! density by adding noise `u ∈ [0,1)^D`: the discrete likelihood is
//! the hypercube integral of the density, and training maximizes a
//! lower bound obtained by sampling `u` from a dequantization
//! distribution `q(u|x)`:
//!
//! * `Uniform` draws `u` from the unit hypercube and reports
//!   `log q = 0`;
//! * `Variational` draws `ε ~ N(0, I)` and pushes it through a small
//!   conditional flow `u = q_x(ε)` ending in an elementwise sigmoid,
//!   reporting `log q(u|x) = log N(ε) − log|∂q_x/∂ε|`.
//!
//! A brute-force midpoint-quadrature oracle for the exact discrete
//! log-likelihood (dimension ≤ 3) anchors the bound in tests.

use crate::conditioning::{BlockSpec, Conditioner};
use crate::error::{Error, Result};
use crate::flows::split::SplitPattern;
use crate::flows::{Coupling, FlowLayer, FlowStack};
use crate::math::{clamp, CDF_EPS};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, uniform_tensor};
use crate::{Expr, Tensor};
use rand::Rng;

/// Integer-valued samples with an explicit bit depth. Values are
/// flat row-major over `shape = [N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct DiscreteData {
    values: Vec<u8>,
    shape: Vec<usize>,
    bit_depth: u8,
}

impl DiscreteData {
    pub fn new(shape: Vec<usize>, values: Vec<u8>, bit_depth: u8) -> Result<Self> {
        if !(1..=8).contains(&bit_depth) {
            return Err(Error::Dataset(format!(
                "bit depth {bit_depth} outside 1..=8"
            )));
        }
        if shape.len() != 4 {
            return Err(Error::Dataset(format!(
                "data shape must be [N,C,H,W], got {shape:?}"
            )));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Dataset(format!(
                "shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        let limit = 1u16 << bit_depth;
        if let Some(v) = values.iter().find(|&&v| u16::from(v) >= limit) {
            return Err(Error::Dataset(format!(
                "value {v} exceeds bit depth {bit_depth}"
            )));
        }
        Ok(DiscreteData {
            values,
            shape,
            bit_depth,
        })
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Shape `[C, H, W]` of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Dimension of one example.
    pub fn dim(&self) -> usize {
        self.example_shape().iter().product()
    }

    /// The values as 64-bit floats.
    pub fn to_f64(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// The values scaled to `[−0.5, 0.5)` for network conditioning;
    /// the density itself always operates on unscaled values.
    pub fn scaled_to_unit(&self) -> Tensor {
        let span = f64::from(1u16 << self.bit_depth);
        self.to_f64().map(|v| v / span - 0.5)
    }

    /// Gather a sub-batch by example indices.
    pub fn select(&self, indices: &[usize]) -> DiscreteData {
        let ex = self.dim();
        let mut values = Vec::with_capacity(indices.len() * ex);
        for &i in indices {
            assert!(i < self.len(), "example index {i} out of range");
            values.extend_from_slice(&self.values[i * ex..(i + 1) * ex]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        DiscreteData {
            values,
            shape,
            bit_depth: self.bit_depth,
        }
    }
}

/// Standard-normal log-density per example of a `[N,...]` tensor.
pub fn standard_normal_logprob(z: &Tensor) -> Tensor {
    let d: usize = z.shape()[1..].iter().product();
    let ln_2pi = std::f64::consts::TAU.ln();
    z.map(|v| v * v)
        .sum_axes(&[1, 2, 3])
        .map(|s| -0.5 * s - 0.5 * d as f64 * ln_2pi)
}

/// One dequantization draw: the continuous target `y = x + u` and the
/// per-example `log q(u|x)` in nats.
#[derive(Clone, Debug)]
pub struct DequantSample {
    pub y: Tensor,
    pub log_q: Tensor,
}

/// The conditional flow of the variational dequantizer: a context
/// network reads the (scaled) data and conditions four couplings over
/// the noise, and a final sigmoid maps into the unit interval.
#[derive(Clone, Debug)]
pub struct VariationalDequantizer {
    pub prefix: String,
    /// Example shape `[C, H, W]`.
    pub shape: Vec<usize>,
    pub ctx_channels: usize,
    pub context: Conditioner,
    pub noise_flow: FlowStack,
}

impl VariationalDequantizer {
    /// Desk-scale architecture: a 2-block convolutional context network
    /// and a noise flow of 2 affine + 2 mixture couplings (alternating
    /// checkerboard parity, all conditioned on the context) closed by a
    /// sigmoid.
    pub fn new(
        prefix: impl Into<String>,
        shape: &[usize],
        k: usize,
        filters: usize,
        ctx_channels: usize,
    ) -> Self {
        assert_eq!(shape.len(), 3, "dequantizer shape must be [C,H,W]");
        let prefix = prefix.into();
        let c = shape[0];
        let context = Conditioner::new(
            format!("{prefix}.ctx"),
            c,
            ctx_channels,
            filters,
            vec![BlockSpec::conv(), BlockSpec::conv()],
        );
        let cb = |parity: u8| SplitPattern::Checkerboard { parity };
        let blocks = vec![BlockSpec::conv()];
        let layers = vec![
            Coupling::affine(
                format!("{prefix}.flow.0"),
                shape,
                cb(0),
                ctx_channels,
                filters,
                blocks.clone(),
            ),
            Coupling::affine(
                format!("{prefix}.flow.1"),
                shape,
                cb(1),
                ctx_channels,
                filters,
                blocks.clone(),
            ),
            Coupling::mixlog(
                format!("{prefix}.flow.2"),
                shape,
                cb(0),
                k,
                ctx_channels,
                filters,
                blocks.clone(),
            ),
            Coupling::mixlog(
                format!("{prefix}.flow.3"),
                shape,
                cb(1),
                k,
                ctx_channels,
                filters,
                blocks,
            ),
            FlowLayer::Sigmoid,
        ];
        let noise_flow = FlowStack::new(shape, layers);
        VariationalDequantizer {
            prefix,
            shape: shape.to_vec(),
            ctx_channels,
            context,
            noise_flow,
        }
    }

    fn ctx_bindings(&self, ps: &ParamStore) -> crate::ad::Bindings<f64> {
        self.context
            .param_names()
            .into_iter()
            .map(|n| {
                let t = ps.get(&n).clone();
                (n, t)
            })
            .collect()
    }

    /// Context activations for a batch of scaled data (tensor regime).
    pub fn context_t(&self, x_scaled: &Tensor, ps: &ParamStore) -> Result<Tensor> {
        let e = self.context.apply_expr(&Expr::constant(x_scaled.clone()));
        crate::ad::forward_eval(&e, &self.ctx_bindings(ps))
    }
}

/// The dequantization noise distribution `q(u|x)`.
#[derive(Clone, Debug)]
pub enum Dequantizer {
    Uniform,
    Variational(VariationalDequantizer),
}

impl Dequantizer {
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        if let Dequantizer::Variational(v) = self {
            v.context.init_params(store, rng);
            v.noise_flow.init_params(store, rng);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Dequantizer::Uniform => vec![],
            Dequantizer::Variational(v) => {
                let mut names = v.context.param_names();
                names.extend(v.noise_flow.param_names());
                names
            }
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            Dequantizer::Uniform => 0,
            Dequantizer::Variational(v) => {
                v.context.scalar_count() + v.noise_flow.scalar_count()
            }
        }
    }

    /// Draw the raw noise this variant consumes: unit-uniform for
    /// `Uniform`, standard normal for `Variational`. Kept separate so
    /// training can fix the draw and differentiate pathwise through it.
    pub fn draw_noise(&self, x: &DiscreteData, rng: &mut impl Rng) -> Tensor {
        match self {
            Dequantizer::Uniform => uniform_tensor(x.shape(), rng),
            Dequantizer::Variational(_) => normal_tensor(x.shape(), rng),
        }
    }

    /// Turn a raw noise draw into `(u, log q)` (tensor regime). The
    /// sigmoid output is nudged off the interval boundary by 1e-12 so
    /// `u ∈ (0,1)` holds in floating point.
    pub fn noise_to_u(
        &self,
        x: &DiscreteData,
        noise: &Tensor,
        ps: &ParamStore,
    ) -> Result<(Tensor, Tensor)> {
        match self {
            Dequantizer::Uniform => Ok((noise.clone(), Tensor::zeros(&[x.len()]))),
            Dequantizer::Variational(v) => {
                let ctx = v.context_t(&x.scaled_to_unit(), ps)?;
                let (u, ld) = v.noise_flow.forward_t(noise, ps, Some(&ctx))?;
                let u = u.map(|t| clamp(t, CDF_EPS, 1.0 - CDF_EPS));
                let base = standard_normal_logprob(noise);
                let log_q = base.zip_map(&ld, |b, l| b - l);
                if !log_q.all_finite() {
                    return Err(Error::ParamBlowUp(
                        "non-finite dequantization log-density".into(),
                    ));
                }
                Ok((u, log_q))
            }
        }
    }

    /// One dequantization draw for a batch. Asserts the support
    /// invariant `y − x ∈ [0,1)^D`.
    pub fn dequantize(
        &self,
        x: &DiscreteData,
        ps: &ParamStore,
        rng: &mut impl Rng,
    ) -> Result<DequantSample> {
        let noise = self.draw_noise(x, rng);
        let (u, log_q) = self.noise_to_u(x, &noise, ps)?;
        for &v in u.data() {
            assert!((0.0..1.0).contains(&v), "noise {v} escaped [0,1)");
        }
        let y = x.to_f64().zip_map(&u, |a, b| a + b);
        Ok(DequantSample { y, log_q })
    }

    /// One per-example importance log-weight,
    /// `log p_model(x+u) − log q(u|x)`, for a fresh draw.
    pub fn log_weight_t(
        &self,
        model: &FlowStack,
        x: &DiscreteData,
        ps: &ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let s = self.dequantize(x, ps, rng)?;
        let lp = model.logprob_t(&s.y, ps, None)?;
        Ok(lp.zip_map(&s.log_q, |p, q| p - q))
    }

    /// Monte Carlo ELBO per example, averaged over `n_samples` draws.
    pub fn elbo_t(
        &self,
        model: &FlowStack,
        x: &DiscreteData,
        ps: &ParamStore,
        rng: &mut impl Rng,
        n_samples: usize,
    ) -> Result<Tensor> {
        assert!(n_samples >= 1, "elbo needs at least one sample");
        let mut acc = Tensor::zeros(&[x.len()]);
        for _ in 0..n_samples {
            let w = self.log_weight_t(model, x, ps, rng)?;
            acc = acc.zip_map(&w, |a, b| a + b);
        }
        Ok(acc.map(|v| v / n_samples as f64))
    }

    /// Graph form of the per-example ELBO for one fixed noise draw.
    /// Model and dequantizer parameters enter as leaves; the noise and
    /// the data are constants, so gradients are pathwise.
    pub fn elbo_expr(&self, model: &FlowStack, x: &DiscreteData, noise: &Tensor) -> Expr {
        let xf = Expr::constant(x.to_f64());
        match self {
            Dequantizer::Uniform => {
                let y = xf.add(&Expr::constant(noise.clone()));
                model.logprob_expr(&y, None)
            }
            Dequantizer::Variational(v) => {
                let ctx = v.context.apply_expr(&Expr::constant(x.scaled_to_unit()));
                let eps = Expr::constant(noise.clone());
                let (u, ld) = v.noise_flow.forward_expr(&eps, Some(&ctx));
                let u = u.clamp_const(CDF_EPS, 1.0 - CDF_EPS);
                let y = xf.add(&u);
                let lp = model.logprob_expr(&y, None);
                let base = Expr::constant(standard_normal_logprob(noise));
                // log q = base − ld, so the objective is lp − base + ld.
                lp.sub(&base).add(&ld)
            }
        }
    }

    /// Exact `log q(u|x)` of a GIVEN noise vector `u`, via the inverse
    /// pass of the conditional flow. Used by normalization tests.
    pub fn log_q_of_u(&self, x: &DiscreteData, u: &Tensor, ps: &ParamStore) -> Result<Tensor> {
        match self {
            Dequantizer::Uniform => Ok(Tensor::zeros(&[x.len()])),
            Dequantizer::Variational(v) => {
                let ctx = v.context_t(&x.scaled_to_unit(), ps)?;
                let (eps, ld_inv) = v.noise_flow.inverse_t(u, ps, Some(&ctx), 1e-12)?;
                let base = standard_normal_logprob(&eps);
                Ok(base.zip_map(&ld_inv, |b, l| b + l))
            }
        }
    }
}

/// Exact discrete log-likelihood `log ∫_{[0,1)^D} p(x+u) du` per
/// example by tensor-product midpoint quadrature with `grid_n` points
/// per axis. Exponential in `D`; restricted to `D ≤ 3`.
pub fn discrete_loglik_oracle(
    model: &FlowStack,
    ps: &ParamStore,
    x: &DiscreteData,
    grid_n: usize,
) -> Result<Tensor> {
    let d = x.dim();
    if d > 3 {
        return Err(Error::InvalidArgument(format!(
            "oracle dimension {d} exceeds 3"
        )));
    }
    if grid_n < 16 {
        return Err(Error::InvalidArgument(format!(
            "oracle grid {grid_n} below 16"
        )));
    }
    let points = grid_n.pow(d as u32);
    let ex_shape = x.example_shape().to_vec();
    let xf = x.to_f64();
    let mut out = Tensor::zeros(&[x.len()]);
    for ex in 0..x.len() {
        let batch_shape = [vec![points], ex_shape.clone()].concat();
        let grid = Tensor::from_fn(&batch_shape, |idx| {
            let flat_dim = idx[1] * ex_shape[1] * ex_shape[2] + idx[2] * ex_shape[2] + idx[3];
            let mut p = idx[0];
            // Axis order: the first data dimension varies slowest.
            let mut offset = 0.0;
            for axis in (0..d).rev() {
                let j = p % grid_n;
                p /= grid_n;
                if axis == flat_dim {
                    offset = (j as f64 + 0.5) / grid_n as f64;
                }
            }
            let base_idx = [&[ex][..], &idx[1..]].concat();
            xf.at(&base_idx) + offset
        });
        let lp = model.logprob_t(&grid, ps, None)?;
        let lse = lp.logsumexp_axis(0).item();
        out.data_mut()[ex] = lse - d as f64 * (grid_n as f64).ln();
    }
    Ok(out)
}

/// Mean oracle log-likelihood minus mean ELBO over `n` draws: a Monte
/// Carlo estimate of `E[KL(q(u|x) ∥ p(u|x))] ≥ 0`.
pub fn bound_gap(
    model: &FlowStack,
    deq: &Dequantizer,
    x: &DiscreteData,
    ps: &ParamStore,
    rng: &mut impl Rng,
    n: usize,
    grid_n: usize,
) -> Result<f64> {
    let oracle = discrete_loglik_oracle(model, ps, x, grid_n)?;
    let elbo = deq.elbo_t(model, x, ps, rng, n)?;
    let diff = oracle.zip_map(&elbo, |o, e| o - e);
    Ok(diff.data().iter().sum::<f64>() / diff.len() as f64)
}
