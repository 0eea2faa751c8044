//! Invertible transformations with exact log-Jacobian-determinants,
//! composed into a `FlowStack`.
//!
//! Every layer supports three views of the same map: `forward_t` and
//! `inverse_t` work directly on tensors (used by sampling, round-trip
//! verification, and data-dependent initialization), and `forward_expr`
//! builds the autodiff graph (used by training). The tensor and graph
//! forms implement identical formulas, and tests pin them against each
//! other.
//!
//! Conventions shared by all layers:
//! * activations are `[N, C, H, W]`;
//! * `forward_t` returns `(y, logdet)` with one log-determinant entry
//!   per batch example;
//! * `inverse_t` returns `(x, logdet)` of the inverse map, so a
//!   forward/inverse pair sums to zero;
//! * parameters live in a `ParamStore` under the layer's name prefix.

pub mod mixlog;
pub mod split;

use crate::ad::{forward_eval, Bindings};
use crate::conditioning::{BlockSpec, Conditioner};
use crate::error::{Error, Result};
use crate::math::{clamp, CDF_EPS};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::{linalg, Expr, Tensor};
use rand::Rng;
use split::SplitPattern;
use std::rc::Rc;

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected [N,C,H,W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn ln_2pi() -> f64 {
    std::f64::consts::TAU.ln()
}

/// Constant per-example log-determinant vector.
fn ld_const(n: usize, v: f64) -> Tensor {
    Tensor::full(&[n], v)
}

fn ld_const_expr(n: usize, e: &Expr) -> Expr {
    e.reshape(&[1]).broadcast_to(&[n])
}

fn log_sigmoid_deriv(x: f64) -> f64 {
    -x.softplus() - (-x).softplus()
}

/// Per-activation affine normalization, `y = (x + bias) · exp(scale)`,
/// with one scale and bias per activation. The log-determinant is the
/// sum of all scales. Parameters start at zero (identity) and are set
/// from data statistics by `FlowStack::actnorm_init`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub prefix: String,
    /// Activation shape `[C, H, W]` at this point of the stack.
    pub shape: Vec<usize>,
}

impl ActNorm {
    pub fn new(prefix: impl Into<String>, shape: &[usize]) -> FlowLayer {
        assert_eq!(shape.len(), 3, "actnorm shape must be [C,H,W]");
        FlowLayer::ActNorm(ActNorm {
            prefix: prefix.into(),
            shape: shape.to_vec(),
        })
    }

    fn scale_name(&self) -> String {
        format!("{}.scale", self.prefix)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    fn forward_t(&self, x: &Tensor, ps: &ParamStore) -> (Tensor, Tensor) {
        let (n, ..) = dims4(x);
        let scale = ps.get(&self.scale_name()).broadcast_to(x.shape());
        let bias = ps.get(&self.bias_name()).broadcast_to(x.shape());
        let y = x
            .zip_map(&bias, |a, b| a + b)
            .zip_map(&scale, |a, s| a * s.exp());
        let ld = ps.get(&self.scale_name()).data().iter().sum();
        (y, ld_const(n, ld))
    }

    fn inverse_t(&self, y: &Tensor, ps: &ParamStore) -> (Tensor, Tensor) {
        let (n, ..) = dims4(y);
        let scale = ps.get(&self.scale_name()).broadcast_to(y.shape());
        let bias = ps.get(&self.bias_name()).broadcast_to(y.shape());
        let x = y
            .zip_map(&scale, |a, s| a * (-s).exp())
            .zip_map(&bias, |a, b| a - b);
        let ld: f64 = ps.get(&self.scale_name()).data().iter().sum();
        (x, ld_const(n, -ld))
    }

    fn forward_expr(&self, x: &Expr) -> (Expr, Expr) {
        let n = x.shape()[0];
        let full = x.shape().to_vec();
        let one_ex = [vec![1], self.shape.clone()].concat();
        let scale = Expr::leaf(self.scale_name(), &self.shape);
        let bias = Expr::leaf(self.bias_name(), &self.shape);
        let scale_b = scale.reshape(&one_ex).broadcast_to(&full);
        let bias_b = bias.reshape(&one_ex).broadcast_to(&full);
        let y = x.add(&bias_b).mul(&scale_b.exp());
        (y, ld_const_expr(n, &scale.sum_all()))
    }

    /// Set parameters from a batch so post-activation per-activation
    /// mean is 0 and variance is 1. Activations with variance below
    /// 1e-12 keep scale 0.
    fn init_from_batch(&self, batch: &Tensor, ps: &mut ParamStore) -> Result<()> {
        let (n, ..) = dims4(batch);
        let mean = batch.mean_axes(&[0]);
        let var = Tensor::from_fn(&self.shape, |idx| {
            let m = mean.at(idx);
            (0..n)
                .map(|b| {
                    let full = [&[b][..], idx].concat();
                    let d = batch.at(&full) - m;
                    d * d
                })
                .sum::<f64>()
                / n as f64
        });
        let scale = var.map(|v| if v < 1e-12 { 0.0 } else { -0.5 * v.ln() });
        let bias = mean.map(|m| -m);
        ps.set(&self.scale_name(), scale)?;
        ps.set(&self.bias_name(), bias)
    }
}

/// Invertible 1×1 convolution: every spatial position's channel vector
/// is multiplied by one shared matrix `W`. The log-determinant is
/// `H·W·log|det W|`, read off the LU factorization performed at each
/// evaluation. Initialization draws a random orthogonal matrix, whose
/// log-determinant is zero.
#[derive(Clone, Debug)]
pub struct Inv1x1 {
    pub prefix: String,
    pub channels: usize,
}

impl Inv1x1 {
    pub fn new(prefix: impl Into<String>, channels: usize) -> FlowLayer {
        assert!(channels > 0);
        FlowLayer::Inv1x1(Inv1x1 {
            prefix: prefix.into(),
            channels,
        })
    }

    fn w_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    fn apply_matrix(&self, x: &Tensor, m: &Tensor) -> Tensor {
        let c = self.channels;
        let kernel = m.reshape(&[c, c, 1, 1]);
        crate::ad::conv2d_raw(x, &kernel)
    }

    fn forward_t(&self, x: &Tensor, ps: &ParamStore) -> Result<(Tensor, Tensor)> {
        let (n, _, h, w) = dims4(x);
        let weight = ps.get(&self.w_name());
        let lu = linalg::lu_factor(weight)?;
        let ld = (h * w) as f64 * lu.log_abs_det();
        Ok((self.apply_matrix(x, weight), ld_const(n, ld)))
    }

    fn inverse_t(&self, y: &Tensor, ps: &ParamStore) -> Result<(Tensor, Tensor)> {
        let (n, _, h, w) = dims4(y);
        let weight = ps.get(&self.w_name());
        let lu = linalg::lu_factor(weight)?;
        let ld = (h * w) as f64 * lu.log_abs_det();
        let inv = linalg::inverse(weight)?;
        Ok((self.apply_matrix(y, &inv), ld_const(n, -ld)))
    }

    fn forward_expr(&self, x: &Expr) -> (Expr, Expr) {
        let (n, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let c = self.channels;
        let weight = Expr::leaf(self.w_name(), &[c, c]);
        let kernel = weight.reshape(&[c, c, 1, 1]);
        let y = x.conv2d(&kernel, None);
        let ld = weight.log_abs_det().mul_scalar((h * w) as f64);
        (y, ld_const_expr(n, &ld))
    }
}

/// Which elementwise transform a coupling applies to its active
/// partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    /// `y = x · exp(a) + b`.
    Affine,
    /// `y = logit(MixLogCDF(x)) · exp(a) + b` with `k` mixture
    /// components.
    MixLog { k: usize },
}

/// A coupling layer: the passive partition of the input passes through
/// unchanged and drives a conditioning network whose output
/// parameterizes an elementwise transform of the active partition.
///
/// The network sees the input with active positions zeroed, optionally
/// concatenated with a context tensor along channels (used by the
/// conditional dequantization flow).
#[derive(Clone, Debug)]
pub struct Coupling {
    pub prefix: String,
    pub kind: CouplingKind,
    pub pattern: SplitPattern,
    /// Activation shape `[C, H, W]` at this point of the stack.
    pub shape: Vec<usize>,
    pub ctx_channels: usize,
    pub net: Conditioner,
}

impl Coupling {
    pub fn affine(
        prefix: impl Into<String>,
        shape: &[usize],
        pattern: SplitPattern,
        ctx_channels: usize,
        filters: usize,
        blocks: Vec<BlockSpec>,
    ) -> FlowLayer {
        let c = Self::build(
            prefix,
            CouplingKind::Affine,
            shape,
            pattern,
            ctx_channels,
            filters,
            blocks,
        );
        FlowLayer::AffineCoupling(c)
    }

    pub fn mixlog(
        prefix: impl Into<String>,
        shape: &[usize],
        pattern: SplitPattern,
        k: usize,
        ctx_channels: usize,
        filters: usize,
        blocks: Vec<BlockSpec>,
    ) -> FlowLayer {
        assert!(k >= 1, "mixture needs at least one component");
        let c = Self::build(
            prefix,
            CouplingKind::MixLog { k },
            shape,
            pattern,
            ctx_channels,
            filters,
            blocks,
        );
        FlowLayer::MixLogCoupling(c)
    }

    fn build(
        prefix: impl Into<String>,
        kind: CouplingKind,
        shape: &[usize],
        pattern: SplitPattern,
        ctx_channels: usize,
        filters: usize,
        blocks: Vec<BlockSpec>,
    ) -> Coupling {
        assert_eq!(shape.len(), 3, "coupling shape must be [C,H,W]");
        let prefix = prefix.into();
        let c = shape[0];
        let out_channels = match kind {
            CouplingKind::Affine => 2 * c,
            CouplingKind::MixLog { k } => c * mixlog::mixlog_param_channels(k),
        };
        let net = Conditioner::new(
            format!("{prefix}.net"),
            c + ctx_channels,
            out_channels,
            filters,
            blocks,
        );
        Coupling {
            prefix,
            kind,
            pattern,
            shape: shape.to_vec(),
            ctx_channels,
            net,
        }
    }

    fn masks(&self) -> (Tensor, Tensor) {
        let passive = self.pattern.passive_mask(&self.shape);
        let active = passive.map(|v| 1.0 - v);
        (passive, active)
    }

    fn net_bindings(&self, ps: &ParamStore) -> Bindings<f64> {
        self.net
            .param_names()
            .into_iter()
            .map(|name| {
                let t = ps.get(&name).clone();
                (name, t)
            })
            .collect()
    }

    /// Evaluate the conditioning network on the masked input (tensor
    /// regime): builds the graph and runs it against the store.
    fn raw_params_t(&self, v: &Tensor, ps: &ParamStore, ctx: Option<&Tensor>) -> Result<Tensor> {
        let (passive, _) = self.masks();
        let masked = v.zip_map(&passive.broadcast_to(v.shape()), |a, m| a * m);
        let net_in = self.attach_ctx_t(masked, ctx);
        let raw_e = self.net.apply_expr(&Expr::constant(net_in));
        forward_eval(&raw_e, &self.net_bindings(ps))
    }

    fn attach_ctx_t(&self, masked: Tensor, ctx: Option<&Tensor>) -> Tensor {
        if self.ctx_channels == 0 {
            return masked;
        }
        let ctx = ctx.expect("coupling built with context channels needs a context tensor");
        assert_eq!(ctx.shape()[1], self.ctx_channels, "context channel count");
        Tensor::concat(&[&masked, ctx], 1)
    }

    fn forward_t(&self, x: &Tensor, ps: &ParamStore, ctx: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let raw = self.raw_params_t(x, ps, ctx)?;
        let (passive, active) = self.masks();
        let (t, ld_elem) = match self.kind {
            CouplingKind::Affine => mixlog::affine_forward_t(x, &raw),
            CouplingKind::MixLog { k } => mixlog::mixlog_forward_t(x, &raw, k, Some(&active))?,
        };
        let pb = passive.broadcast_to(x.shape());
        let ab = active.broadcast_to(x.shape());
        let y = Tensor::from_fn(x.shape(), |i| {
            x.at(i) * pb.at(i) + t.at(i) * ab.at(i)
        });
        let ld = ld_elem.zip_map(&ab, |l, a| l * a).sum_axes(&[1, 2, 3]);
        Ok((y, ld))
    }

    fn inverse_t(
        &self,
        y: &Tensor,
        ps: &ParamStore,
        ctx: Option<&Tensor>,
        tol: f64,
    ) -> Result<(Tensor, Tensor)> {
        let raw = self.raw_params_t(y, ps, ctx)?;
        let (passive, active) = self.masks();
        let x_full = match self.kind {
            CouplingKind::Affine => mixlog::affine_inverse_t(y, &raw),
            CouplingKind::MixLog { k } => mixlog::mixlog_inverse_t(y, &raw, k, tol)?,
        };
        let pb = passive.broadcast_to(y.shape());
        let ab = active.broadcast_to(y.shape());
        let x = Tensor::from_fn(y.shape(), |i| {
            y.at(i) * pb.at(i) + x_full.at(i) * ab.at(i)
        });
        // Log-determinant of the inverse = negated forward value at the
        // recovered point. The saturation check is skipped (mask of
        // zeros): the recovered point is already inside the clamp band.
        let no_check = Tensor::zeros(&self.shape);
        let ld_elem = match self.kind {
            CouplingKind::Affine => mixlog::affine_forward_t(&x, &raw).1,
            CouplingKind::MixLog { k } => {
                mixlog::mixlog_forward_t(&x, &raw, k, Some(&no_check))?.1
            }
        };
        let ld = ld_elem.zip_map(&ab, |l, a| -l * a).sum_axes(&[1, 2, 3]);
        Ok((x, ld))
    }

    fn forward_expr(&self, x: &Expr, ctx: Option<&Expr>) -> (Expr, Expr) {
        let full = x.shape().to_vec();
        let one_ex = [vec![1], self.shape.clone()].concat();
        let (passive, active) = self.masks();
        let pb = Expr::constant(passive.reshape(&one_ex)).broadcast_to(&full);
        let ab = Expr::constant(active.reshape(&one_ex)).broadcast_to(&full);
        let masked = x.mul(&pb);
        let net_in = if self.ctx_channels == 0 {
            masked
        } else {
            let ctx = ctx.expect("coupling built with context channels needs a context expr");
            assert_eq!(ctx.shape()[1], self.ctx_channels, "context channel count");
            Expr::concat(&[&masked, ctx], 1)
        };
        let raw = self.net.apply_expr(&net_in);
        let (t, ld_elem) = match self.kind {
            CouplingKind::Affine => mixlog::affine_forward_expr(x, &raw),
            CouplingKind::MixLog { k } => mixlog::mixlog_forward_expr(x, &raw, k),
        };
        let y = x.mul(&pb).add(&t.mul(&ab));
        let ld = ld_elem.mul(&ab).sum_axes(&[1, 2, 3]);
        (y, ld)
    }
}

/// Flat index map for space-to-depth: output position
/// `[n, s·C + c, y, x]` reads input `[n, c, 2y+sy, 2x+sx]` with
/// `s = 2·sy + sx`.
fn squeeze_indices(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for s in 0..4 {
            let (sy, sx) = (s / 2, s % 2);
            for ci in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        idx.push(((ni * c + ci) * h + 2 * y + sy) * w + 2 * x + sx);
                    }
                }
            }
        }
    }
    idx
}

/// Flat index map for depth-to-space, inverting `squeeze_indices`.
fn unsqueeze_indices(n: usize, c4: usize, h2: usize, w2: usize) -> Vec<usize> {
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let mut idx = Vec::with_capacity(n * c4 * h2 * w2);
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let s = 2 * (yy % 2) + (xx % 2);
                    idx.push(((ni * c4 + s * c + ci) * h2 + yy / 2) * w2 + xx / 2);
                }
            }
        }
    }
    idx
}

fn gather_t(x: &Tensor, idx: &[usize], out_shape: &[usize]) -> Tensor {
    let data = x.data();
    Tensor::new(out_shape.to_vec(), idx.iter().map(|&i| data[i]).collect())
}

fn even_spatial(t: &Tensor) -> Result<()> {
    let (_, _, h, w) = dims4(t);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "squeeze needs even spatial extents, got {h}×{w}"
        )));
    }
    Ok(())
}

/// One invertible layer. See the module docs for the shared contract.
#[derive(Clone, Debug)]
pub enum FlowLayer {
    ActNorm(ActNorm),
    Inv1x1(Inv1x1),
    AffineCoupling(Coupling),
    MixLogCoupling(Coupling),
    /// Space-to-depth: `[C,H,W]` → `[4C,H/2,W/2]`, volume preserving.
    Squeeze,
    /// Depth-to-space, the exact inverse of `Squeeze`.
    Unsqueeze,
    /// Elementwise logistic sigmoid into (0,1).
    Sigmoid,
    /// Elementwise logit from (0,1); inputs are clamped away from the
    /// boundary by 1e-12.
    Logit,
}

impl FlowLayer {
    /// Shape `[C,H,W]` this layer produces from the given input shape.
    /// Panics on shapes the layer cannot accept.
    pub fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        assert_eq!(input.len(), 3, "layer shapes are [C,H,W]");
        match self {
            FlowLayer::ActNorm(l) => {
                assert_eq!(l.shape, input, "actnorm {} shape mismatch", l.prefix);
                input.to_vec()
            }
            FlowLayer::Inv1x1(l) => {
                assert_eq!(l.channels, input[0], "inv1x1 {} channel mismatch", l.prefix);
                input.to_vec()
            }
            FlowLayer::AffineCoupling(c) | FlowLayer::MixLogCoupling(c) => {
                assert_eq!(c.shape, input, "coupling {} shape mismatch", c.prefix);
                input.to_vec()
            }
            FlowLayer::Squeeze => {
                assert!(
                    input[1] % 2 == 0 && input[2] % 2 == 0,
                    "squeeze needs even spatial extents, got {:?}",
                    input
                );
                vec![4 * input[0], input[1] / 2, input[2] / 2]
            }
            FlowLayer::Unsqueeze => {
                assert!(input[0] % 4 == 0, "unsqueeze needs 4k channels");
                vec![input[0] / 4, input[1] * 2, input[2] * 2]
            }
            FlowLayer::Sigmoid | FlowLayer::Logit => input.to_vec(),
        }
    }

    /// Register this layer's parameters with initial values.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        match self {
            FlowLayer::ActNorm(l) => {
                store.insert(l.scale_name(), Tensor::zeros(&l.shape));
                store.insert(l.bias_name(), Tensor::zeros(&l.shape));
            }
            FlowLayer::Inv1x1(l) => {
                store.insert(l.w_name(), linalg::random_orthogonal(l.channels, rng));
            }
            FlowLayer::AffineCoupling(c) | FlowLayer::MixLogCoupling(c) => {
                c.net.init_params(store, rng);
            }
            _ => {}
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            FlowLayer::ActNorm(l) => vec![l.scale_name(), l.bias_name()],
            FlowLayer::Inv1x1(l) => vec![l.w_name()],
            FlowLayer::AffineCoupling(c) | FlowLayer::MixLogCoupling(c) => c.net.param_names(),
            _ => vec![],
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            FlowLayer::ActNorm(l) => 2 * l.shape.iter().product::<usize>(),
            FlowLayer::Inv1x1(l) => l.channels * l.channels,
            FlowLayer::AffineCoupling(c) | FlowLayer::MixLogCoupling(c) => c.net.scalar_count(),
            _ => 0,
        }
    }

    pub fn forward_t(
        &self,
        x: &Tensor,
        ps: &ParamStore,
        ctx: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = dims4(x);
        match self {
            FlowLayer::ActNorm(l) => Ok(l.forward_t(x, ps)),
            FlowLayer::Inv1x1(l) => l.forward_t(x, ps),
            FlowLayer::AffineCoupling(cp) | FlowLayer::MixLogCoupling(cp) => {
                cp.forward_t(x, ps, ctx)
            }
            FlowLayer::Squeeze => {
                even_spatial(x)?;
                let idx = squeeze_indices(n, c, h, w);
                let y = gather_t(x, &idx, &[n, 4 * c, h / 2, w / 2]);
                Ok((y, ld_const(n, 0.0)))
            }
            FlowLayer::Unsqueeze => {
                let idx = unsqueeze_indices(n, c, h, w);
                let y = gather_t(x, &idx, &[n, c / 4, 2 * h, 2 * w]);
                Ok((y, ld_const(n, 0.0)))
            }
            FlowLayer::Sigmoid => {
                let y = x.map(|v| v.sigmoid());
                let ld = x.map(log_sigmoid_deriv).sum_axes(&[1, 2, 3]);
                Ok((y, ld))
            }
            FlowLayer::Logit => {
                let xc = x.map(|v| clamp(v, CDF_EPS, 1.0 - CDF_EPS));
                let y = xc.map(|v| v.ln() - (1.0 - v).ln());
                let ld = xc
                    .map(|v| -(v.ln() + (1.0 - v).ln()))
                    .sum_axes(&[1, 2, 3]);
                Ok((y, ld))
            }
        }
    }

    pub fn inverse_t(
        &self,
        y: &Tensor,
        ps: &ParamStore,
        ctx: Option<&Tensor>,
        tol: f64,
    ) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = dims4(y);
        match self {
            FlowLayer::ActNorm(l) => Ok(l.inverse_t(y, ps)),
            FlowLayer::Inv1x1(l) => l.inverse_t(y, ps),
            FlowLayer::AffineCoupling(cp) | FlowLayer::MixLogCoupling(cp) => {
                cp.inverse_t(y, ps, ctx, tol)
            }
            FlowLayer::Squeeze => FlowLayer::Unsqueeze.forward_t(y, ps, ctx),
            FlowLayer::Unsqueeze => {
                even_spatial(y)?;
                let idx = squeeze_indices(n, c, h, w);
                let x = gather_t(y, &idx, &[n, 4 * c, h / 2, w / 2]);
                Ok((x, ld_const(n, 0.0)))
            }
            FlowLayer::Sigmoid => {
                let yc = y.map(|v| clamp(v, CDF_EPS, 1.0 - CDF_EPS));
                let x = yc.map(|v| v.ln() - (1.0 - v).ln());
                let ld = yc
                    .map(|v| -(v.ln() + (1.0 - v).ln()))
                    .sum_axes(&[1, 2, 3]);
                Ok((x, ld))
            }
            FlowLayer::Logit => {
                let x = y.map(|v| v.sigmoid());
                let ld = y.map(log_sigmoid_deriv).sum_axes(&[1, 2, 3]);
                Ok((x, ld))
            }
        }
    }

    pub fn forward_expr(&self, x: &Expr, ctx: Option<&Expr>) -> (Expr, Expr) {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        match self {
            FlowLayer::ActNorm(l) => l.forward_expr(x),
            FlowLayer::Inv1x1(l) => l.forward_expr(x),
            FlowLayer::AffineCoupling(cp) | FlowLayer::MixLogCoupling(cp) => {
                cp.forward_expr(x, ctx)
            }
            FlowLayer::Squeeze => {
                assert!(h % 2 == 0 && w % 2 == 0, "squeeze needs even extents");
                let idx = Rc::new(squeeze_indices(n, c, h, w));
                let y = x.gather(idx, &[n, 4 * c, h / 2, w / 2]);
                (y, Expr::constant(ld_const(n, 0.0)))
            }
            FlowLayer::Unsqueeze => {
                let idx = Rc::new(unsqueeze_indices(n, c, h, w));
                let y = x.gather(idx, &[n, c / 4, 2 * h, 2 * w]);
                (y, Expr::constant(ld_const(n, 0.0)))
            }
            FlowLayer::Sigmoid => {
                let y = x.sigmoid();
                let ld = x.softplus().add(&x.neg().softplus()).neg();
                (y, ld.sum_axes(&[1, 2, 3]))
            }
            FlowLayer::Logit => {
                let xc = x.clamp_const(CDF_EPS, 1.0 - CDF_EPS);
                let one_minus = xc.neg().add_scalar(1.0);
                let y = xc.log().sub(&one_minus.log());
                let ld = xc.log().add(&one_minus.log()).neg();
                (y, ld.sum_axes(&[1, 2, 3]))
            }
        }
    }
}

/// An ordered composition of flow layers with a standard-normal base
/// distribution. The log-probability of `x` is the base log-density of
/// the forward image plus the accumulated log-determinants.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
    /// Input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
}

impl FlowStack {
    /// Compose layers, verifying that shapes chain.
    pub fn new(input_shape: &[usize], layers: Vec<FlowLayer>) -> Self {
        assert_eq!(input_shape.len(), 3, "stack input shape must be [C,H,W]");
        let mut cur = input_shape.to_vec();
        for layer in &layers {
            cur = layer.out_shape(&cur);
        }
        FlowStack {
            layers,
            input_shape: input_shape.to_vec(),
        }
    }

    /// Shape `[C,H,W]` of the base-space output.
    pub fn out_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .fold(self.input_shape.clone(), |s, l| l.out_shape(&s))
    }

    /// Total dimension of one example.
    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for layer in &self.layers {
            layer.init_params(store, rng);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(|l| l.param_names()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(|l| l.scalar_count()).sum()
    }

    /// Map data to base space. Returns `(z, logdet)` with one log-det
    /// entry per example.
    pub fn forward_t(
        &self,
        x: &Tensor,
        ps: &ParamStore,
        ctx: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let n = x.shape()[0];
        let mut cur = x.clone();
        let mut ld = ld_const(n, 0.0);
        for layer in &self.layers {
            let (y, l) = layer.forward_t(&cur, ps, ctx)?;
            cur = y;
            ld = ld.zip_map(&l, |a, b| a + b);
        }
        Ok((cur, ld))
    }

    /// Map base space to data. Returns `(x, logdet)` of the inverse
    /// pass; `tol` bounds the bisection error inside mixture couplings.
    pub fn inverse_t(
        &self,
        z: &Tensor,
        ps: &ParamStore,
        ctx: Option<&Tensor>,
        tol: f64,
    ) -> Result<(Tensor, Tensor)> {
        let n = z.shape()[0];
        let mut cur = z.clone();
        let mut ld = ld_const(n, 0.0);
        for layer in self.layers.iter().rev() {
            let (x, l) = layer.inverse_t(&cur, ps, ctx, tol)?;
            cur = x;
            ld = ld.zip_map(&l, |a, b| a + b);
        }
        Ok((cur, ld))
    }

    /// Exact log-density in nats, one entry per example.
    pub fn logprob_t(&self, x: &Tensor, ps: &ParamStore, ctx: Option<&Tensor>) -> Result<Tensor> {
        let (z, ld) = self.forward_t(x, ps, ctx)?;
        let d: usize = z.shape()[1..].iter().product();
        let base = z
            .map(|v| v * v)
            .sum_axes(&[1, 2, 3])
            .map(|s| -0.5 * s - 0.5 * d as f64 * ln_2pi());
        Ok(base.zip_map(&ld, |a, b| a + b))
    }

    /// Draw `n` samples by inverting the stack on base-normal draws.
    pub fn sample(
        &self,
        ps: &ParamStore,
        rng: &mut impl Rng,
        n: usize,
        tol: f64,
    ) -> Result<Tensor> {
        let out = self.out_shape();
        let z = crate::rng::normal_tensor(&[vec![n], out].concat(), rng);
        Ok(self.inverse_t(&z, ps, None, tol)?.0)
    }

    /// Graph form of `forward_t`; parameters enter as named leaves.
    pub fn forward_expr(&self, x: &Expr, ctx: Option<&Expr>) -> (Expr, Expr) {
        let n = x.shape()[0];
        let mut cur = x.clone();
        let mut ld: Option<Expr> = None;
        for layer in &self.layers {
            let (y, l) = layer.forward_expr(&cur, ctx);
            cur = y;
            ld = Some(match ld {
                None => l,
                Some(acc) => acc.add(&l),
            });
        }
        let ld = ld.unwrap_or_else(|| Expr::constant(ld_const(n, 0.0)));
        (cur, ld)
    }

    /// Graph form of `logprob_t`, one entry per example.
    pub fn logprob_expr(&self, x: &Expr, ctx: Option<&Expr>) -> Expr {
        let (z, ld) = self.forward_expr(x, ctx);
        let d: usize = z.shape()[1..].iter().product();
        let base = z
            .square()
            .sum_axes(&[1, 2, 3])
            .mul_scalar(-0.5)
            .add_scalar(-0.5 * d as f64 * ln_2pi());
        base.add(&ld)
    }

    /// Walk the stack on a batch, setting every actnorm layer's
    /// parameters from the activations that reach it.
    pub fn actnorm_init(
        &self,
        ps: &mut ParamStore,
        batch: &Tensor,
        ctx: Option<&Tensor>,
    ) -> Result<()> {
        let mut cur = batch.clone();
        for layer in &self.layers {
            if let FlowLayer::ActNorm(l) = layer {
                l.init_from_batch(&cur, ps)?;
            }
            cur = layer.forward_t(&cur, ps, ctx)?.0;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::forward_eval_many;
    use crate::rng::{normal_tensor, stream_rng, STREAM_INIT};

    fn small_stack(shape: &[usize]) -> FlowStack {
        let blocks = vec![BlockSpec::conv()];
        FlowStack::new(
            shape,
            vec![
                ActNorm::new("f0", shape),
                Inv1x1::new("f1", shape[0]),
                Coupling::mixlog(
                    "f2",
                    shape,
                    SplitPattern::Checkerboard { parity: 0 },
                    3,
                    0,
                    4,
                    blocks.clone(),
                ),
                Coupling::affine(
                    "f3",
                    shape,
                    SplitPattern::Checkerboard { parity: 1 },
                    0,
                    4,
                    blocks,
                ),
            ],
        )
    }

    fn randomize_couplings(stack: &FlowStack, ps: &mut ParamStore, seed: u64) {
        let mut rng = stream_rng(seed, STREAM_INIT, 1);
        for layer in &stack.layers {
            if let FlowLayer::AffineCoupling(c) | FlowLayer::MixLogCoupling(c) = layer {
                for tail in ["out.w", "out.b"] {
                    let name = format!("{}.net.{tail}", c.prefix);
                    let shape = ps.get(&name).shape().to_vec();
                    let t = normal_tensor::<f64>(&shape, &mut rng).map(|v| v * 0.3);
                    ps.set(&name, t).unwrap();
                }
            }
        }
    }

    #[test]
    fn fresh_stack_is_the_identity_with_zero_logdet_modulo_inv1x1_rotation() {
        let shape = [1usize, 4, 2];
        let stack = small_stack(&shape);
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(7, STREAM_INIT, 0);
        stack.init_params(&mut ps, &mut rng);
        let x = normal_tensor::<f64>(&[3, 1, 4, 2], &mut rng);
        let (_, ld) = stack.forward_t(&x, &ps, None).unwrap();
        for &v in ld.data() {
            assert!(v.abs() < 1e-10, "fresh stack logdet {v}");
        }
    }

    #[test]
    fn forward_then_inverse_round_trips_with_antisymmetric_logdets() {
        let shape = [1usize, 4, 2];
        let stack = small_stack(&shape);
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(11, STREAM_INIT, 0);
        stack.init_params(&mut ps, &mut rng);
        randomize_couplings(&stack, &mut ps, 11);
        let x = normal_tensor::<f64>(&[4, 1, 4, 2], &mut rng);
        let (y, ld_f) = stack.forward_t(&x, &ps, None).unwrap();
        let (back, ld_i) = stack.inverse_t(&y, &ps, None, 1e-12).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6, "{}", back.max_abs_diff(&x));
        let anti = ld_f.zip_map(&ld_i, |a, b| a + b);
        for &v in anti.data() {
            assert!(v.abs() < 1e-8, "logdet antisymmetry off by {v}");
        }
    }

    #[test]
    fn graph_and_tensor_forward_agree() {
        let shape = [1usize, 4, 2];
        let stack = small_stack(&shape);
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(13, STREAM_INIT, 0);
        stack.init_params(&mut ps, &mut rng);
        randomize_couplings(&stack, &mut ps, 13);
        let x = normal_tensor::<f64>(&[2, 1, 4, 2], &mut rng);
        let (yt, ldt) = stack.forward_t(&x, &ps, None).unwrap();
        let (ye, lde) = stack.forward_expr(&Expr::constant(x), None);
        let got = forward_eval_many(&[ye, lde], &ps.bindings()).unwrap();
        assert!(got[0].max_abs_diff(&yt) < 1e-10);
        assert!(got[1].max_abs_diff(&ldt) < 1e-10);
    }

    #[test]
    fn empty_stack_logprob_is_the_standard_normal_density() {
        let stack = FlowStack::new(&[1, 2, 1], vec![]);
        let ps = ParamStore::new();
        let x = Tensor::zeros(&[1, 1, 2, 1]);
        let lp = stack.logprob_t(&x, &ps, None).unwrap();
        assert!((lp.item() - (-1.8378770664093453)).abs() < 1e-12);
    }

    #[test]
    fn squeeze_rearranges_and_round_trips_exactly() {
        assert_eq!(
            FlowLayer::Squeeze.out_shape(&[3, 8, 8]),
            vec![12, 4, 4],
            "shape arithmetic"
        );
        let mut rng = stream_rng(17, STREAM_INIT, 0);
        let x = normal_tensor::<f64>(&[2, 3, 4, 4], &mut rng);
        let ps = ParamStore::new();
        let (y, ld) = FlowLayer::Squeeze.forward_t(&x, &ps, None).unwrap();
        assert_eq!(y.shape(), &[2, 12, 2, 2]);
        assert!(ld.data().iter().all(|&v| v == 0.0));
        let (back, _) = FlowLayer::Squeeze.inverse_t(&y, &ps, None, 0.0).unwrap();
        assert_eq!(back.data(), x.data(), "bitwise round-trip");

        let odd = normal_tensor::<f64>(&[1, 1, 3, 4], &mut rng);
        assert!(matches!(
            FlowLayer::Squeeze.forward_t(&odd, &ps, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sigmoid_and_logit_are_mutual_inverses_with_opposite_logdets() {
        let mut rng = stream_rng(19, STREAM_INIT, 0);
        let x = normal_tensor::<f64>(&[3, 2, 2, 2], &mut rng);
        let ps = ParamStore::new();
        let (y, ld_s) = FlowLayer::Sigmoid.forward_t(&x, &ps, None).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (back, ld_l) = FlowLayer::Logit.forward_t(&y, &ps, None).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
        let anti = ld_s.zip_map(&ld_l, |a, b| a + b);
        for &v in anti.data() {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn actnorm_init_normalizes_each_activation_of_the_batch() {
        let shape = [2usize, 3, 1];
        let stack = FlowStack::new(&shape, vec![ActNorm::new("a0", &shape)]);
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(23, STREAM_INIT, 0);
        stack.init_params(&mut ps, &mut rng);
        let batch = normal_tensor::<f64>(&[64, 2, 3, 1], &mut rng).map(|v| 3.0 * v + 1.5);
        stack.actnorm_init(&mut ps, &batch, None).unwrap();
        let (y, _) = stack.forward_t(&batch, &ps, None).unwrap();
        let mean = y.mean_axes(&[0]);
        for &m in mean.data() {
            assert!(m.abs() < 1e-9, "post-init mean {m}");
        }
        let var = y.map(|v| v * v).mean_axes(&[0]).zip_map(&mean, |s, m| s - m * m);
        for &v in var.data() {
            assert!((v - 1.0).abs() < 1e-6, "post-init variance {v}");
        }
    }

    #[test]
    fn actnorm_init_keeps_scale_zero_for_constant_activations() {
        let shape = [1usize, 2, 1];
        let stack = FlowStack::new(&shape, vec![ActNorm::new("a0", &shape)]);
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(29, STREAM_INIT, 0);
        stack.init_params(&mut ps, &mut rng);
        let batch = Tensor::from_fn(&[8, 1, 2, 1], |i| if i[2] == 0 { 5.0 } else { i[0] as f64 });
        stack.actnorm_init(&mut ps, &batch, None).unwrap();
        let scale = ps.get("a0.scale");
        assert_eq!(scale.data()[0], 0.0, "degenerate activation keeps scale 0");
        assert!(scale.data()[1] != 0.0);
        let bias = ps.get("a0.bias");
        assert!((bias.data()[0] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn inv1x1_known_logdets_and_singular_rejection() {
        let mut ps = ParamStore::new();
        ps.insert("m.w", Tensor::from_fn(&[2, 2], |i| if i[0] == i[1] { 2.0 } else { 0.0 }));
        let layer = Inv1x1::new("m", 2);
        let x = Tensor::ones(&[1, 2, 1, 1]);
        let (y, ld) = layer.forward_t(&x, &ps, None).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
        assert!((ld.item() - 4.0f64.ln()).abs() < 1e-12, "det(2I₂)=4");

        ps.set("m.w", Tensor::ones(&[2, 2])).unwrap();
        assert!(matches!(
            layer.forward_t(&x, &ps, None),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn coupling_leaves_the_passive_partition_unchanged() {
        let shape = [1usize, 4, 2];
        let layer = Coupling::mixlog(
            "c",
            &shape,
            SplitPattern::Checkerboard { parity: 0 },
            2,
            0,
            4,
            vec![BlockSpec::conv()],
        );
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(31, STREAM_INIT, 0);
        layer.init_params(&mut ps, &mut rng);
        let stack = FlowStack::new(&shape, vec![layer]);
        randomize_couplings(&stack, &mut ps, 31);
        let x = normal_tensor::<f64>(&[2, 1, 4, 2], &mut rng);
        let (y, _) = stack.forward_t(&x, &ps, None).unwrap();
        let mask = SplitPattern::Checkerboard { parity: 0 }
            .passive_mask(&shape)
            .broadcast_to(x.shape());
        let mut moved = 0;
        for i in 0..x.len() {
            if mask.data()[i] == 1.0 {
                assert_eq!(y.data()[i], x.data()[i], "passive element moved");
            } else if (y.data()[i] - x.data()[i]).abs() > 1e-9 {
                moved += 1;
            }
        }
        assert!(moved > 0, "active partition never moved");
    }

    #[test]
    fn conditional_coupling_uses_its_context() {
        let shape = [2usize, 2, 2];
        let layer = Coupling::affine(
            "c",
            &shape,
            SplitPattern::Channel { parity: 0 },
            2,
            4,
            vec![BlockSpec::conv()],
        );
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(37, STREAM_INIT, 0);
        layer.init_params(&mut ps, &mut rng);
        let stack = FlowStack::new(&shape, vec![layer]);
        randomize_couplings(&stack, &mut ps, 37);
        let x = normal_tensor::<f64>(&[1, 2, 2, 2], &mut rng);
        let ctx_a = Tensor::zeros(&[1, 2, 2, 2]);
        let ctx_b = Tensor::ones(&[1, 2, 2, 2]);
        let (ya, _) = stack.forward_t(&x, &ps, Some(&ctx_a)).unwrap();
        let (yb, _) = stack.forward_t(&x, &ps, Some(&ctx_b)).unwrap();
        assert!(ya.max_abs_diff(&yb) > 1e-9, "context had no effect");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let shape = [1usize, 2, 2];
        let stack = small_stack(&shape);
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(41, STREAM_INIT, 0);
        stack.init_params(&mut ps, &mut rng);
        let draw = |seed: u64| {
            let mut r = stream_rng(seed, crate::rng::STREAM_SAMPLE, 0);
            stack.sample(&ps, &mut r, 3, 1e-10).unwrap()
        };
        let a = draw(5);
        let b = draw(5);
        assert_eq!(a.data(), b.data(), "same seed, same samples");
        let c = draw(6);
        assert!(a.max_abs_diff(&c) > 0.0, "different seed, different samples");
    }
}
