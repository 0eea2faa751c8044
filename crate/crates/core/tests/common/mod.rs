//! Shared helpers for the integration suites: random invertible
//! stacks, finite-difference Jacobian oracles, and small discrete
//! datasets. Everything is seeded so failures replay exactly.

#![allow(dead_code)]

use flowkit_core::ad::{eval_with_grads, finite_diff_grads, Bindings};
use flowkit_core::conditioning::BlockSpec;
use flowkit_core::dequant::DiscreteData;
use flowkit_core::flows::split::SplitPattern;
use flowkit_core::flows::{ActNorm, Coupling, FlowLayer, FlowStack, Inv1x1};
use flowkit_core::linalg;
use flowkit_core::params::ParamStore;
use flowkit_core::rng::{normal_tensor, stream_rng, STREAM_INIT};
use flowkit_core::{Expr, Tensor};

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;

/// Add seeded Gaussian noise to every parameter so transforms are
/// non-trivial without leaving the numerically comfortable band.
pub fn perturb_params(ps: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = stream_rng(seed, STREAM_INIT, 99);
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let shape = ps.get(&name).shape().to_vec();
        let noise = normal_tensor(&shape, &mut rng);
        let updated = ps.get(&name).zip_map(&noise, |p, n| p + scale * n);
        ps.set(&name, updated).expect("same shape");
    }
}

/// A random invertible stack of up to `max_layers` layers over a
/// random shape with at most `max_dim` activations, with perturbed
/// parameters. Couplings, squeezes, and transforms with constrained
/// domains are only inserted where the running shape allows them.
pub fn random_stack(seed: u64, max_dim: usize, max_layers: usize) -> (FlowStack, ParamStore) {
    let mut rng = stream_rng(seed, STREAM_INIT, 7);
    let shapes: &[[usize; 3]] = &[
        [1, 1, 1],
        [2, 1, 1],
        [1, 2, 2],
        [2, 2, 2],
        [3, 2, 2],
        [1, 4, 4],
        [2, 4, 4],
        [3, 4, 4],
        [2, 4, 2],
        [1, 2, 3],
    ];
    let candidates: Vec<&[usize; 3]> = shapes
        .iter()
        .filter(|s| s.iter().product::<usize>() <= max_dim)
        .collect();
    let shape = *candidates[rng.gen_range(0..candidates.len())];

    let n_layers = rng.gen_range(2..=max_layers.max(2));
    let mut cur = shape;
    let mut layers: Vec<FlowLayer> = Vec::new();
    let mut i = 0;
    while layers.len() < n_layers {
        let prefix = format!("l{i}");
        i += 1;
        let [c, h, w] = cur;
        let spatial_ok = h * w > 1;
        let channel_ok = c > 1;
        match rng.gen_range(0..6) {
            0 => layers.push(ActNorm::new(&prefix, &cur)),
            1 => layers.push(Inv1x1::new(&prefix, c)),
            2 | 3 if spatial_ok || channel_ok => {
                let parity = rng.gen_range(0..2u8);
                let pattern = if spatial_ok {
                    SplitPattern::Checkerboard { parity }
                } else {
                    SplitPattern::Channel { parity }
                };
                let layer = if rng.gen_bool(0.5) {
                    Coupling::mixlog(&prefix, &cur, pattern, 3, 0, 3, vec![BlockSpec::conv()])
                } else {
                    Coupling::affine(&prefix, &cur, pattern, 0, 3, vec![BlockSpec::conv()])
                };
                layers.push(layer);
            }
            4 if h % 2 == 0 && w % 2 == 0 => {
                layers.push(FlowLayer::Squeeze);
                cur = [4 * c, h / 2, w / 2];
            }
            5 if layers.len() + 2 <= n_layers.max(2) => {
                layers.push(FlowLayer::Sigmoid);
                layers.push(FlowLayer::Logit);
            }
            _ => layers.push(ActNorm::new(&prefix, &cur)),
        }
    }

    let stack = FlowStack::new(&shape, layers);
    let mut ps = ParamStore::new();
    stack.init_params(&mut ps, &mut stream_rng(seed, STREAM_INIT, 8));
    perturb_params(&mut ps, seed, 0.25);
    (stack, ps)
}

/// log|det J| of the stack at `x` (one example) by central differences.
pub fn fd_logdet_stack(stack: &FlowStack, ps: &ParamStore, x: &Tensor, h: f64) -> f64 {
    let d = x.len();
    let mut jac = Tensor::zeros(&[d, d]);
    for j in 0..d {
        let mut plus = x.clone();
        plus.data_mut()[j] += h;
        let mut minus = x.clone();
        minus.data_mut()[j] -= h;
        let (yp, _) = stack.forward_t(&plus, ps, None).expect("forward");
        let (ym, _) = stack.forward_t(&minus, ps, None).expect("forward");
        for i in 0..d {
            jac.data_mut()[i * d + j] = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
        }
    }
    linalg::log_abs_det(&jac).expect("non-singular Jacobian")
}

/// Max relative disagreement between reverse-mode and central-difference
/// gradients over every leaf of `root`.
pub fn grad_rel_err(root: &Expr, bindings: &Bindings<f64>, h: f64) -> f64 {
    let names: Vec<&str> = bindings.keys().map(String::as_str).collect();
    let (_, analytic) = eval_with_grads(root, bindings, &names).expect("grads");
    let numeric = finite_diff_grads(root, bindings, &names, h).expect("fd grads");
    let mut worst: f64 = 0.0;
    for name in &names {
        for (a, n) in analytic[*name].data().iter().zip(numeric[*name].data()) {
            worst = worst.max((a - n).abs() / n.abs().max(1e-3));
        }
    }
    worst
}

/// A 1-D discrete dataset ([n,1,1,1]) drawn from a two-bump mixture,
/// quantized to `bit_depth` levels.
pub fn line_dataset(seed: u64, n: usize, bit_depth: u8) -> DiscreteData {
    let mut rng = stream_rng(seed, STREAM_INIT, 17);
    let levels = 1u16 << bit_depth;
    let max = (levels - 1) as f64;
    let values: Vec<u8> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = if rng.gen_bool(0.6) {
                0.30 * max + 0.18 * max * z
            } else {
                0.72 * max + 0.12 * max * z
            };
            (v.floor().clamp(0.0, max)) as u8
        })
        .collect();
    DiscreteData::new(vec![n, 1, 1, 1], values, bit_depth).expect("valid dataset")
}

/// Uniformly random points with entries in [lo, hi].
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new(lo, hi);
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| dist.sample(rng))
        .collect();
    Tensor::new(shape.to_vec(), data)
}
