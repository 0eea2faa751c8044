//! Dequantization properties: the variational bound never exceeds the
//! quadrature oracle, discrete masses stay normalized, importance
//! weighting tightens with more samples, and noise stays in its box.

mod common;

use flowkit_core::conditioning::BlockSpec;
use flowkit_core::dequant::{discrete_loglik_oracle, Dequantizer, DiscreteData, VariationalDequantizer};
use flowkit_core::flows::split::SplitPattern;
use flowkit_core::flows::{ActNorm, Coupling, FlowStack};
use flowkit_core::params::ParamStore;
use flowkit_core::rng::{stream_rng, STREAM_DEQUANT, STREAM_INIT};
use flowkit_core::training::importance_weighted_bpd;
use proptest::prelude::*;

/// A frozen 1-D model with perturbed parameters.
fn line_model(seed: u64) -> (FlowStack, ParamStore) {
    let shape = [1usize, 1, 1];
    let stack = FlowStack::new(
        &shape,
        vec![
            ActNorm::new("f0", &shape),
            Coupling::mixlog(
                "f1",
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
    stack.init_params(&mut ps, &mut stream_rng(seed, STREAM_INIT, 0));
    common::perturb_params(&mut ps, seed, 0.3);
    (stack, ps)
}

fn variational_for(shape: &[usize; 3], seed: u64, ps: &mut ParamStore) -> Dequantizer {
    let deq = Dequantizer::Variational(VariationalDequantizer::new("deq", shape, 2, 3, 2));
    deq.init_params(ps, &mut stream_rng(seed, STREAM_INIT, 1));
    deq
}

/// Every representable discrete value once, as a dataset.
fn full_support(bit_depth: u8) -> DiscreteData {
    let levels = 1usize << bit_depth;
    let values: Vec<u8> = (0..levels as u8).collect();
    DiscreteData::new(vec![levels, 1, 1, 1], values, bit_depth).expect("valid")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The quadrature masses of all discrete hypercubes sum to at
    /// most one: the continuous density cannot promise more than
    /// total mass 1 across the quantization bins.
    #[test]
    fn discrete_masses_never_exceed_unity(seed in 0u64..10_000, bit_depth in 1u8..4) {
        let (model, ps) = line_model(seed);
        let data = full_support(bit_depth);
        let logp = discrete_loglik_oracle(&model, &ps, &data, 64).expect("oracle");
        let mass: f64 = logp.data().iter().map(|&v| v.exp()).sum();
        prop_assert!(mass <= 1.0 + 1e-6, "mass {mass}");
    }

    /// Single-sample bound estimates stay below the oracle
    /// log-likelihood within Monte Carlo slack, for both dequantizers.
    #[test]
    fn bound_never_beats_the_oracle(seed in 0u64..10_000) {
        let (model, ps) = line_model(seed);
        let data = common::line_dataset(seed, 48, 2);
        let oracle = discrete_loglik_oracle(&model, &ps, &data, 64).expect("oracle");
        let oracle_mean: f64 = oracle.data().iter().sum::<f64>() / data.len() as f64;

        for variational in [false, true] {
            let mut ps = ps.clone();
            let deq = if variational {
                variational_for(&[1, 1, 1], seed, &mut ps)
            } else {
                Dequantizer::Uniform
            };
            let draws = 64;
            let mut rng = stream_rng(seed, STREAM_DEQUANT, 2);
            let mut means = Vec::with_capacity(draws);
            for _ in 0..draws {
                let elbo = deq.elbo_t(&model, &data, &ps, &mut rng, 1).expect("elbo");
                means.push(elbo.data().iter().sum::<f64>() / data.len() as f64);
            }
            let mean = means.iter().sum::<f64>() / draws as f64;
            let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>()
                / (draws as f64 - 1.0);
            let se = (var / draws as f64).sqrt();
            prop_assert!(
                mean <= oracle_mean + 3.0 * se,
                "variational={variational}: bound {mean} vs oracle {oracle_mean} (se {se})"
            );
        }
    }

    /// Variational noise lands strictly inside the unit interval and
    /// its density evaluates finite there.
    #[test]
    fn variational_noise_stays_in_the_open_unit_box(seed in 0u64..10_000) {
        let (_, mut ps) = line_model(seed);
        let deq = variational_for(&[1, 1, 1], seed, &mut ps);
        let data = common::line_dataset(seed, 32, 2);
        let sample = deq
            .dequantize(&data, &ps, &mut stream_rng(seed, STREAM_DEQUANT, 3))
            .expect("dequantize");
        for (&c, &v) in sample.y.data().iter().zip(data.to_f64().data()) {
            let u = c - v;
            prop_assert!(u > 0.0 && u < 1.0, "u = {u}");
        }
        prop_assert!(sample.log_q.data().iter().all(|v| v.is_finite()));
    }
}

/// More importance samples tighten the likelihood estimate on average:
/// K=16 should not be worse than K=1 beyond Monte Carlo slack.
#[test]
fn importance_weighting_tightens_with_more_samples() {
    let (model, mut ps) = line_model(42);
    let deq = variational_for(&[1, 1, 1], 42, &mut ps);
    let data = common::line_dataset(42, 64, 2);

    let runs = 12;
    let mut d1 = Vec::with_capacity(runs);
    let mut d16 = Vec::with_capacity(runs);
    for r in 0..runs as u64 {
        let mut rng = stream_rng(777 + r, STREAM_DEQUANT, 4);
        d1.push(importance_weighted_bpd(&model, &deq, &data, &ps, 1, &mut rng).expect("k=1"));
        let mut rng = stream_rng(777 + r, STREAM_DEQUANT, 5);
        d16.push(importance_weighted_bpd(&model, &deq, &data, &ps, 16, &mut rng).expect("k=16"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m1 = mean(&d1);
    let m16 = mean(&d16);
    let var1 = d1.iter().map(|v| (v - m1).powi(2)).sum::<f64>() / (runs as f64 - 1.0);
    let se1 = (var1 / runs as f64).sqrt();
    assert!(
        m16 <= m1 + se1,
        "K=16 mean {m16} should not exceed K=1 mean {m1} + 1 se ({se1})"
    );
}
