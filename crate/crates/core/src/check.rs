//! Self-verification harness: named runtime checks over round-trips,
//! Jacobians, gradients, quadrature, and structure, with optional
//! defect injection so the harness can demonstrate it catches the
//! regressions it exists to catch.
//!
//! Defects live entirely inside this module: an injected defect alters
//! how a check drives the library (a flipped log-det, a loosened
//! bisection tolerance, a degraded gate), never the library itself.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::ad::{eval_with_grads, finite_diff_grads, Bindings};
use crate::conditioning::{BlockSpec, Conditioner};
use crate::dataio::{read_tensor, write_tensor_f64, TensorFile};
use crate::dequant::{Dequantizer, DiscreteData, VariationalDequantizer};
use crate::error::{Error, Result};
use crate::flows::split::SplitPattern;
use crate::flows::{ActNorm, Coupling, FlowLayer, FlowStack, Inv1x1};
use crate::linalg;
use crate::math::{mixlog_log_pdf, mixlog_logit_cdf, BISECT_TOL};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, stream_rng, STREAM_INIT};
use crate::{Expr, Tensor};

/// A defect the harness can inject into its own drive of the library.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Defect {
    /// Negate the mixture coupling's reported log-det.
    MixlogLogdetSignFlip,
    /// Loosen the coupling-inversion bisection tolerance to 1e-2.
    BisectionTolLoose,
    /// Build gates without the channel doubling the gated linear unit
    /// needs.
    GateNoChannelDoubling,
}

impl Defect {
    pub const ALL: [Defect; 3] = [
        Defect::MixlogLogdetSignFlip,
        Defect::BisectionTolLoose,
        Defect::GateNoChannelDoubling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Defect::MixlogLogdetSignFlip => "mixlog-logdet-sign-flip",
            Defect::BisectionTolLoose => "bisection-tol-loose",
            Defect::GateNoChannelDoubling => "gate-no-channel-doubling",
        }
    }
}

impl FromStr for Defect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Defect::ALL
            .iter()
            .find(|d| d.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown defect {s:?}; expected one of: {}",
                    Defect::ALL.map(|d| d.name()).join(", ")
                ))
            })
    }
}

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub ms: f64,
}

struct Check {
    name: &'static str,
    run: fn(Option<Defect>) -> (bool, String),
}

fn le(value: f64, tol: f64, what: &str) -> (bool, String) {
    (value <= tol, format!("{what} {value:.3e} (tolerance {tol:.1e})"))
}

fn coupling_tol(defect: Option<Defect>) -> f64 {
    if defect == Some(Defect::BisectionTolLoose) {
        1e-2
    } else {
        BISECT_TOL
    }
}

fn perturb_params(ps: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = stream_rng(seed, STREAM_INIT, 1);
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let shape = ps.get(&name).shape().to_vec();
        let noise = normal_tensor(&shape, &mut rng);
        let updated = ps.get(&name).zip_map(&noise, |p, n| p + scale * n);
        ps.set(&name, updated).expect("same shape");
    }
}

fn layer_with_params(layer: FlowLayer, seed: u64, scale: f64) -> (FlowLayer, ParamStore) {
    let mut ps = ParamStore::new();
    layer.init_params(&mut ps, &mut stream_rng(seed, STREAM_INIT, 0));
    perturb_params(&mut ps, seed, scale);
    (layer, ps)
}

fn roundtrip_error(
    layer: &FlowLayer,
    ps: &ParamStore,
    shape: &[usize],
    points: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    let x = normal_tensor(&[vec![points], shape.to_vec()].concat(), &mut stream_rng(seed, STREAM_INIT, 2));
    let (y, _) = layer.forward_t(&x, ps, None)?;
    let (back, _) = layer.inverse_t(&y, ps, None, tol)?;
    Ok(x.zip_map(&back, |a, b| (a - b).abs())
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v)))
}

fn check_roundtrip_actnorm(_: Option<Defect>) -> (bool, String) {
    let shape = [2usize, 2, 2];
    let (layer, ps) = layer_with_params(ActNorm::new("a", &shape), 11, 0.4);
    match roundtrip_error(&layer, &ps, &shape, 100, 11, BISECT_TOL) {
        Ok(err) => le(err, 1e-10, "max reconstruction error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_roundtrip_inv1x1(_: Option<Defect>) -> (bool, String) {
    let shape = [3usize, 2, 2];
    let (layer, ps) = layer_with_params(Inv1x1::new("w", 3), 12, 0.2);
    match roundtrip_error(&layer, &ps, &shape, 100, 12, BISECT_TOL) {
        Ok(err) => le(err, 1e-10, "max reconstruction error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn checked_coupling(kind: &str, seed: u64) -> (FlowLayer, ParamStore, [usize; 3]) {
    let shape = [2usize, 2, 2];
    let pattern = SplitPattern::Checkerboard { parity: 0 };
    let layer = match kind {
        "affine" => Coupling::affine("c", &shape, pattern, 0, 3, vec![BlockSpec::conv()]),
        _ => Coupling::mixlog("c", &shape, pattern, 3, 0, 3, vec![BlockSpec::conv()]),
    };
    let (layer, ps) = layer_with_params(layer, seed, 0.3);
    (layer, ps, shape)
}

fn check_roundtrip_affine(defect: Option<Defect>) -> (bool, String) {
    let (layer, ps, shape) = checked_coupling("affine", 13);
    match roundtrip_error(&layer, &ps, &shape, 100, 13, coupling_tol(defect)) {
        Ok(err) => le(err, 1e-6, "max reconstruction error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_roundtrip_mixlog(defect: Option<Defect>) -> (bool, String) {
    let (layer, ps, shape) = checked_coupling("mixlog", 14);
    match roundtrip_error(&layer, &ps, &shape, 100, 14, coupling_tol(defect)) {
        Ok(err) => le(err, 1e-6, "max reconstruction error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_roundtrip_squeeze(_: Option<Defect>) -> (bool, String) {
    let shape = [2usize, 4, 4];
    let layer = FlowLayer::Squeeze;
    let ps = ParamStore::new();
    match roundtrip_error(&layer, &ps, &shape, 100, 15, BISECT_TOL) {
        Ok(err) => le(err, 0.0, "max rearrangement error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_roundtrip_sigmoid_logit(_: Option<Defect>) -> (bool, String) {
    let shape = [1usize, 3, 3];
    let ps = ParamStore::new();
    let err_s = roundtrip_error(&FlowLayer::Sigmoid, &ps, &shape, 100, 16, BISECT_TOL);
    let x: Tensor = normal_tensor(&[50, 1, 3, 3], &mut stream_rng(16, STREAM_INIT, 3))
        .map(|v: f64| 1.0 / (1.0 + (-v).exp()));
    let err_l = (|| -> Result<f64> {
        let (y, _) = FlowLayer::Logit.forward_t(&x, &ps, None)?;
        let (back, _) = FlowLayer::Logit.inverse_t(&y, &ps, None, BISECT_TOL)?;
        Ok(x.zip_map(&back, |a, b| (a - b).abs())
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v)))
    })();
    match (err_s, err_l) {
        (Ok(a), Ok(b)) => le(a.max(b), 1e-10, "max reconstruction error"),
        (Err(e), _) | (_, Err(e)) => (false, format!("{e}")),
    }
}

fn composite_stack(seed: u64) -> (FlowStack, ParamStore) {
    let shape = [2usize, 2, 2];
    let stack = FlowStack::new(
        &shape,
        vec![
            ActNorm::new("s0", &shape),
            Inv1x1::new("s1", 2),
            Coupling::mixlog(
                "s2",
                &shape,
                SplitPattern::Checkerboard { parity: 1 },
                3,
                0,
                3,
                vec![BlockSpec::conv()],
            ),
            FlowLayer::Sigmoid,
            FlowLayer::Logit,
        ],
    );
    let mut ps = ParamStore::new();
    stack.init_params(&mut ps, &mut stream_rng(seed, STREAM_INIT, 0));
    perturb_params(&mut ps, seed, 0.2);
    (stack, ps)
}

fn check_roundtrip_composite(defect: Option<Defect>) -> (bool, String) {
    let (stack, ps) = composite_stack(17);
    let x = normal_tensor(&[100, 2, 2, 2], &mut stream_rng(17, STREAM_INIT, 2));
    let result = (|| -> Result<f64> {
        let (z, ld_f) = stack.forward_t(&x, &ps, None)?;
        let (back, ld_i) = stack.inverse_t(&z, &ps, None, coupling_tol(defect))?;
        let recon = x
            .zip_map(&back, |a, b| (a - b).abs())
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        let anti = ld_f
            .zip_map(&ld_i, |a, b| (a + b).abs())
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        Ok(recon.max(anti * 1e-3))
    })();
    match result {
        Ok(err) => le(err, 1e-6, "max reconstruction error"),
        Err(e) => (false, format!("{e}")),
    }
}

/// Finite-difference log|det J| of a layer at one input point.
fn fd_log_abs_det(
    layer: &FlowLayer,
    ps: &ParamStore,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let d = x.len();
    let mut jac = Tensor::zeros(&[d, d]);
    for j in 0..d {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let (yp, _) = layer.forward_t(&plus, ps, None)?;
        let (ym, _) = layer.forward_t(&minus, ps, None)?;
        for i in 0..d {
            jac.data_mut()[i * d + j] = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
        }
    }
    linalg::log_abs_det(&jac)
}

fn jacobian_check(
    layer: &FlowLayer,
    ps: &ParamStore,
    shape: &[usize],
    seed: u64,
    flip: bool,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut rng = stream_rng(seed, STREAM_INIT, 4);
    for _ in 0..5 {
        let x = normal_tensor(&[vec![1], shape.to_vec()].concat(), &mut rng);
        let (_, ld) = layer.forward_t(&x, ps, None)?;
        let mut analytic = ld.data()[0];
        if flip {
            analytic = -analytic;
        }
        let numeric = fd_log_abs_det(layer, ps, &x, 1e-5)?;
        let denom = numeric.abs().max(1e-3);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

fn check_jacobian_actnorm(_: Option<Defect>) -> (bool, String) {
    let shape = [1usize, 2, 3];
    let (layer, ps) = layer_with_params(ActNorm::new("a", &shape), 21, 0.4);
    match jacobian_check(&layer, &ps, &shape, 21, false) {
        Ok(err) => le(err, 1e-4, "max relative log-det error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_jacobian_inv1x1(_: Option<Defect>) -> (bool, String) {
    let shape = [3usize, 1, 2];
    let (layer, ps) = layer_with_params(Inv1x1::new("w", 3), 22, 0.2);
    match jacobian_check(&layer, &ps, &shape, 22, false) {
        Ok(err) => le(err, 1e-4, "max relative log-det error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_jacobian_affine(_: Option<Defect>) -> (bool, String) {
    let shape = [1usize, 2, 3];
    let layer = Coupling::affine(
        "c",
        &shape,
        SplitPattern::Checkerboard { parity: 0 },
        0,
        3,
        vec![BlockSpec::conv()],
    );
    let (layer, ps) = layer_with_params(layer, 23, 0.3);
    match jacobian_check(&layer, &ps, &shape, 23, false) {
        Ok(err) => le(err, 1e-4, "max relative log-det error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_jacobian_mixlog(defect: Option<Defect>) -> (bool, String) {
    let shape = [1usize, 2, 3];
    let layer = Coupling::mixlog(
        "c",
        &shape,
        SplitPattern::Checkerboard { parity: 0 },
        3,
        0,
        3,
        vec![BlockSpec::conv()],
    );
    let (layer, ps) = layer_with_params(layer, 24, 0.3);
    let flip = defect == Some(Defect::MixlogLogdetSignFlip);
    match jacobian_check(&layer, &ps, &shape, 24, flip) {
        Ok(err) => le(err, 1e-4, "max relative log-det error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_jacobian_composite(defect: Option<Defect>) -> (bool, String) {
    let (stack, ps) = composite_stack(25);
    let flip = defect == Some(Defect::MixlogLogdetSignFlip);
    let result = (|| -> Result<f64> {
        let mut worst: f64 = 0.0;
        let mut rng = stream_rng(25, STREAM_INIT, 4);
        for _ in 0..3 {
            let x = normal_tensor(&[1, 2, 2, 2], &mut rng);
            let (_, ld) = stack.forward_t(&x, &ps, None)?;
            let analytic = if flip { -ld.data()[0] } else { ld.data()[0] };
            let d = x.len();
            let mut jac = Tensor::zeros(&[d, d]);
            for j in 0..d {
                let mut plus = x.clone();
                plus.data_mut()[j] += 1e-5;
                let mut minus = x.clone();
                minus.data_mut()[j] -= 1e-5;
                let (yp, _) = stack.forward_t(&plus, &ps, None)?;
                let (ym, _) = stack.forward_t(&minus, &ps, None)?;
                for i in 0..d {
                    jac.data_mut()[i * d + j] = (yp.data()[i] - ym.data()[i]) / 2e-5;
                }
            }
            let numeric = linalg::log_abs_det(&jac)?;
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-3));
        }
        Ok(worst)
    })();
    match result {
        Ok(err) => le(err, 1e-4, "max relative log-det error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn conditioner_for_check(defect: Option<Defect>) -> Conditioner {
    let mut net = Conditioner::new(
        "g",
        2,
        4,
        4,
        vec![BlockSpec::conv(), BlockSpec::attn(2)],
    );
    if defect == Some(Defect::GateNoChannelDoubling) {
        net.gate_mult = 1;
    }
    net
}

fn check_gradient_primitives(_: Option<Defect>) -> (bool, String) {
    let net = conditioner_for_check(None);
    let mut ps = ParamStore::new();
    net.init_params(&mut ps, &mut stream_rng(31, STREAM_INIT, 0));
    perturb_params(&mut ps, 31, 0.2);
    let x = Expr::constant(normal_tensor(&[2, 2, 2, 2], &mut stream_rng(31, STREAM_INIT, 2)));
    let out = net.apply_expr(&x);
    let root = out.square().mean_all().add(&out.logsumexp(1).mean_all());
    grad_agreement(&root, &ps.bindings(), 1e-3)
}

fn check_gradient_elbo(_: Option<Defect>) -> (bool, String) {
    let shape = [1usize, 2, 1];
    let stack = FlowStack::new(
        &shape,
        vec![
            ActNorm::new("m0", &shape),
            Coupling::mixlog(
                "m1",
                &shape,
                SplitPattern::Checkerboard { parity: 0 },
                2,
                0,
                2,
                vec![BlockSpec::conv()],
            ),
        ],
    );
    let deq = Dequantizer::Variational(VariationalDequantizer::new("deq", &shape, 2, 2, 2));
    let mut ps = ParamStore::new();
    let mut rng = stream_rng(32, STREAM_INIT, 0);
    stack.init_params(&mut ps, &mut rng);
    deq.init_params(&mut ps, &mut rng);
    perturb_params(&mut ps, 32, 0.1);

    let data = DiscreteData::new(
        vec![4, 1, 2, 1],
        vec![0, 1, 2, 3, 3, 2, 1, 0],
        2,
    )
    .expect("valid data");
    let noise = deq.draw_noise(&data, &mut stream_rng(32, STREAM_INIT, 5));
    let root = deq.elbo_expr(&stack, &data, &noise).mean_all();
    grad_agreement(&root, &ps.bindings(), 1e-3)
}

fn grad_agreement(root: &Expr, bindings: &Bindings<f64>, tol: f64) -> (bool, String) {
    let names: Vec<&str> = bindings.keys().map(String::as_str).collect();
    let result = (|| -> Result<f64> {
        let (_, analytic) = eval_with_grads(root, bindings, &names)?;
        let numeric = finite_diff_grads(root, bindings, &names, 1e-5)?;
        let mut worst: f64 = 0.0;
        for name in &names {
            let a = &analytic[*name];
            let n = &numeric[*name];
            for (av, nv) in a.data().iter().zip(n.data()) {
                let denom = nv.abs().max(1e-3);
                worst = worst.max((av - nv).abs() / denom);
            }
        }
        Ok(worst)
    })();
    match result {
        Ok(err) => le(err, tol, "max relative gradient error"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_quadrature_cdf(_: Option<Defect>) -> (bool, String) {
    let log_pi = [(0.5f64).ln(), (0.3f64).ln(), (0.2f64).ln()];
    let means = [-1.0, 0.5, 2.0];
    let log_scales = [-0.2, 0.3, -0.5];
    let (lo, hi) = (-9.0, 10.0);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let mut mass = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        mass += w * mixlog_log_pdf(x, &log_pi, &means, &log_scales).exp();
    }
    mass *= h;
    let span = crate::math::mixlog_cdf(hi, &log_pi, &means, &log_scales)
        - crate::math::mixlog_cdf(lo, &log_pi, &means, &log_scales);
    let err = (mass - span).abs();

    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..200 {
        let x = -10.0 + i as f64 * 0.1;
        let t = mixlog_logit_cdf(x, &log_pi, &means, &log_scales);
        if t <= prev {
            monotone = false;
        }
        prev = t;
    }
    if !monotone {
        return (false, "logit CDF is not strictly increasing".into());
    }
    le(err, 1e-6, "quadrature mass vs CDF span error")
}

fn check_quadrature_density(_: Option<Defect>) -> (bool, String) {
    let shape = [1usize, 1, 1];
    let stack = FlowStack::new(
        &shape,
        vec![
            ActNorm::new("d0", &shape),
            Coupling::mixlog(
                "d1",
                &shape,
                SplitPattern::Channel { parity: 1 },
                3,
                0,
                2,
                vec![BlockSpec::conv()],
            ),
        ],
    );
    let mut ps = ParamStore::new();
    stack.init_params(&mut ps, &mut stream_rng(41, STREAM_INIT, 0));
    perturb_params(&mut ps, 41, 0.3);
    let result = (|| -> Result<f64> {
        let (lo, hi) = (-20.0, 24.0);
        let n = 6000;
        let h = (hi - lo) / n as f64;
        let mut mass = 0.0;
        for i in 0..=n {
            let x = Tensor::full(&[1, 1, 1, 1], lo + i as f64 * h);
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            mass += w * stack.logprob_t(&x, &ps, None)?.data()[0].exp();
        }
        Ok((mass * h - 1.0).abs())
    })();
    match result {
        Ok(err) => le(err, 1e-3, "density mass deviation from 1"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_structure_gate(defect: Option<Defect>) -> (bool, String) {
    let net = conditioner_for_check(defect);
    let mut ps = ParamStore::new();
    net.init_params(&mut ps, &mut stream_rng(51, STREAM_INIT, 0));
    for block in 0..2 {
        let name = format!("g.b{block}.gate.w");
        let out_channels = ps.get(&name).shape()[0];
        if out_channels != 2 * net.filters {
            return (
                false,
                format!(
                    "{name} has {out_channels} output channels, expected {} (2x filters)",
                    2 * net.filters
                ),
            );
        }
    }
    (true, "every gate doubles its channels before the split".into())
}

fn check_structure_actnorm_init(_: Option<Defect>) -> (bool, String) {
    let shape = [2usize, 2, 1];
    let stack = FlowStack::new(&shape, vec![ActNorm::new("a", &shape)]);
    let mut ps = ParamStore::new();
    stack.init_params(&mut ps, &mut stream_rng(52, STREAM_INIT, 0));
    let batch = normal_tensor(&[128, 2, 2, 1], &mut stream_rng(52, STREAM_INIT, 2))
        .map(|v| 3.0 * v + 1.5);
    let result = (|| -> Result<f64> {
        stack.actnorm_init(&mut ps, &batch, None)?;
        let (y, _) = stack.forward_t(&batch, &ps, None)?;
        let n = 128.0;
        let mut worst: f64 = 0.0;
        for c in 0..2 {
            for h in 0..2 {
                let mut mean = 0.0;
                let mut sq = 0.0;
                for i in 0..128 {
                    let v = y.at(&[i, c, h, 0]);
                    mean += v;
                    sq += v * v;
                }
                mean /= n;
                let var = sq / n - mean * mean;
                worst = worst.max(mean.abs()).max((var - 1.0).abs());
            }
        }
        Ok(worst)
    })();
    match result {
        Ok(err) => le(err, 1e-6, "worst post-init moment deviation"),
        Err(e) => (false, format!("{e}")),
    }
}

fn check_persistence_tensorfile(_: Option<Defect>) -> (bool, String) {
    let dir = std::env::temp_dir().join(format!("flowkit-check-{}", std::process::id()));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        return (false, format!("{e}"));
    }
    let path = dir.join("check.fpt");
    let t = normal_tensor(&[3, 5], &mut stream_rng(61, STREAM_INIT, 0));
    let result = (|| -> Result<bool> {
        write_tensor_f64(&path, &t)?;
        match read_tensor(&path)? {
            TensorFile::F64 { shape, data } => {
                Ok(shape == vec![3, 5] && data == t.data())
            }
            _ => Ok(false),
        }
    })();
    match result {
        Ok(true) => (true, "write/read round-trip is bitwise".into()),
        Ok(false) => (false, "payload or shape changed across the round-trip".into()),
        Err(e) => (false, format!("{e}")),
    }
}

fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "roundtrip.actnorm", run: check_roundtrip_actnorm },
        Check { name: "roundtrip.inv1x1", run: check_roundtrip_inv1x1 },
        Check { name: "roundtrip.affine_coupling", run: check_roundtrip_affine },
        Check { name: "roundtrip.mixlog_coupling", run: check_roundtrip_mixlog },
        Check { name: "roundtrip.squeeze", run: check_roundtrip_squeeze },
        Check { name: "roundtrip.sigmoid_logit", run: check_roundtrip_sigmoid_logit },
        Check { name: "roundtrip.composite", run: check_roundtrip_composite },
        Check { name: "jacobian.actnorm", run: check_jacobian_actnorm },
        Check { name: "jacobian.inv1x1", run: check_jacobian_inv1x1 },
        Check { name: "jacobian.affine_coupling", run: check_jacobian_affine },
        Check { name: "jacobian.mixlog_coupling", run: check_jacobian_mixlog },
        Check { name: "jacobian.composite", run: check_jacobian_composite },
        Check { name: "gradient.primitives", run: check_gradient_primitives },
        Check { name: "gradient.elbo", run: check_gradient_elbo },
        Check { name: "quadrature.cdf", run: check_quadrature_cdf },
        Check { name: "quadrature.density", run: check_quadrature_density },
        Check { name: "structure.gate", run: check_structure_gate },
        Check { name: "structure.actnorm_init", run: check_structure_actnorm_init },
        Check { name: "persistence.tensorfile", run: check_persistence_tensorfile },
    ]
}

/// The names of every available check, for listings and tests.
pub fn check_names() -> Vec<&'static str> {
    all_checks().iter().map(|c| c.name).collect()
}

/// Run the checks whose names contain `filter` (all when `None`),
/// optionally injecting a defect, across up to `threads` workers.
/// Results come back in registry order regardless of thread count.
pub fn run_checks(
    filter: Option<&str>,
    defect: Option<Defect>,
    threads: usize,
) -> Vec<CheckOutcome> {
    let selected: Vec<Check> = all_checks()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect();
    let slots: Mutex<Vec<Option<CheckOutcome>>> = Mutex::new(vec![None; selected.len()]);
    let cursor = AtomicUsize::new(0);
    let workers = threads.clamp(1, selected.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= selected.len() {
                    break;
                }
                let check = &selected[i];
                let started = Instant::now();
                let (passed, detail) = (check.run)(defect);
                let outcome = CheckOutcome {
                    name: check.name,
                    passed,
                    detail,
                    ms: started.elapsed().as_secs_f64() * 1e3,
                };
                slots.lock().expect("no poisoned checks")[i] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned checks")
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

/// Plain-text table of check outcomes.
pub fn format_check_table(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&format!(
            "{:<28} {:<4} {:>8.1}ms  {}\n",
            o.name,
            if o.passed { "ok" } else { "FAIL" },
            o.ms,
            o.detail
        ));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    out.push_str(&format!(
        "{} checks, {} failed\n",
        outcomes.len(),
        failed
    ));
    out
}
