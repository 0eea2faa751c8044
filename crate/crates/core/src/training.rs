//! Training loop: adaptive-moment ascent on the dequantization ELBO,
//! data-dependent initialization, bits/dim accounting, importance-
//! weighted evaluation, and the four-variant ablation protocol.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::eval_with_grads;
use crate::dequant::{bound_gap, Dequantizer, DiscreteData};
use crate::error::{Error, Result};
use crate::flows::FlowStack;
use crate::model::{ablation_variants, build_dequantizer, build_model, DequantSpec, ModelSpec};
use crate::params::ParamStore;
use crate::rng::{stream_rng, STREAM_DEQUANT, STREAM_INIT, STREAM_SHUFFLE};
use crate::Tensor;

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    10
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_val_every() -> usize {
    10
}
fn default_gap_every() -> usize {
    50
}
fn default_gap_samples() -> usize {
    16
}
fn default_gap_grid() -> usize {
    32
}
fn default_threads() -> usize {
    1
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    /// Emit validation bits/dim every this many steps (0 = final step
    /// only).
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    /// Emit a bound-gap estimate every this many steps when the data
    /// dimension is at most 3 (0 = never).
    #[serde(default = "default_gap_every")]
    pub gap_every: usize,
    /// Monte-Carlo draws for the ELBO side of the bound gap.
    #[serde(default = "default_gap_samples")]
    pub gap_samples: usize,
    /// Quadrature points per dimension for the oracle side.
    #[serde(default = "default_gap_grid")]
    pub gap_grid: usize,
    /// Worker threads for batch-sharded gradient computation.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults materialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.gap_every > 0 && (self.gap_samples == 0 || self.gap_grid < 16) {
            return bad("bound-gap estimation needs gap_samples >= 1 and gap_grid >= 16");
        }
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        Ok(())
    }
}

/// One line of the metrics log. `nats` is the mean per-example ELBO of
/// the step's batch; `gap` is the variational bound gap (oracle minus
/// ELBO), present only at its cadence and only when the data dimension
/// allows the quadrature oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub nats: f64,
    pub bpd_train: f64,
    pub bpd_val: Option<f64>,
    pub gap: Option<f64>,
    pub ms: f64,
}

/// Convert a mean log-likelihood in nats to bits per dimension.
pub fn bits_per_dim(nats: f64, d: usize) -> f64 {
    assert!(d >= 1, "bits/dim needs at least one dimension");
    -nats / (d as f64 * LN_2)
}

/// Deterministic 90/10 split by seeded shuffle.
pub fn split_dataset(data: &DiscreteData, seed: u64) -> Result<(DiscreteData, DiscreteData)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 examples to split, got {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut stream_rng(seed, STREAM_SHUFFLE, 0));
    let val_n = (n / 10).max(1);
    let train_n = n - val_n;
    Ok((
        data.select(&indices[..train_n]),
        data.select(&indices[train_n..]),
    ))
}

/// First and second moment accumulators, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Scale gradients in place so their global norm is at most `clip`.
pub fn clip_global_norm(grads: &mut HashMap<String, Tensor>, clip: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * scale);
        }
    }
    norm
}

fn adam_update(
    ps: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    opt.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(opt.t as i32);
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        *m = m.zip_map(g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g);
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        *v = v.zip_map(g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g);
        let (m, v) = (&opt.m[&name], &opt.v[&name]);
        let step = m.zip_map(v, |m, v| {
            cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon)
        });
        let updated = ps.get(&name).zip_map(&step, |p, s| p - s);
        if !updated.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite update for parameter {name}"
            )));
        }
        ps.set(&name, updated)?;
    }
    Ok(())
}

fn numerical(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence(_) | Error::NonFinite { .. } | Error::ParamBlowUp(_)
    )
}

fn divergence_from(e: Error) -> Error {
    match e {
        Error::NonFinite { node, op } => Error::Divergence(format!(
            "non-finite value in the {op} operation (graph node {node})"
        )),
        Error::ParamBlowUp(msg) => Error::Divergence(format!("transform parameters blew up: {msg}")),
        other => other,
    }
}

fn noise_rows(noise: &Tensor, lo: usize, hi: usize) -> Tensor {
    let ex: usize = noise.shape()[1..].iter().product();
    let mut shape = noise.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(shape, noise.data()[lo * ex..hi * ex].to_vec())
}

/// Negated-ELBO value and gradient sums over one shard of the batch.
fn shard_loss(
    model: &FlowStack,
    deq: &Dequantizer,
    shard: &DiscreteData,
    noise: &Tensor,
    bindings: &HashMap<String, Tensor>,
    wrt: &[&str],
) -> Result<(f64, HashMap<String, Tensor>)> {
    let objective = deq.elbo_expr(model, shard, noise);
    let root = objective.sum_all().mul_scalar(-1.0);
    let (value, grads) = eval_with_grads(&root, bindings, wrt)?;
    Ok((value.item(), grads))
}

/// One gradient step on the mean batch ELBO. Returns the mean ELBO in
/// nats. The batch may be sharded across `cfg.threads` workers; shard
/// gradients are summed in shard order, so a run is deterministic for
/// a fixed thread count.
pub fn train_step(
    model: &FlowStack,
    deq: &Dequantizer,
    batch: &DiscreteData,
    ps: &mut ParamStore,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = batch.len();
    let noise = deq.draw_noise(batch, rng);
    let bindings = ps.bindings();
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();

    let threads = cfg.threads.min(n).max(1);
    let mut total_loss = 0.0;
    let mut total_grads: HashMap<String, Tensor> = HashMap::new();
    let shard_results: Vec<Result<(f64, HashMap<String, Tensor>)>> = if threads == 1 {
        vec![shard_loss(model, deq, batch, &noise, &bindings, &wrt)]
    } else {
        let bounds: Vec<(usize, usize)> = (0..threads)
            .map(|i| (i * n / threads, (i + 1) * n / threads))
            .collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = bounds
                .iter()
                .map(|&(lo, hi)| {
                    let (bindings, wrt, noise) = (&bindings, &wrt, &noise);
                    scope.spawn(move || {
                        let indices: Vec<usize> = (lo..hi).collect();
                        let shard = batch.select(&indices);
                        let shard_noise = noise_rows(noise, lo, hi);
                        shard_loss(model, deq, &shard, &shard_noise, bindings, wrt)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    };
    for result in shard_results {
        let (loss, grads) = result.map_err(divergence_from)?;
        total_loss += loss;
        for (name, g) in grads {
            match total_grads.get_mut(&name) {
                Some(acc) => *acc = acc.zip_map(&g, |a, b| a + b),
                None => {
                    total_grads.insert(name, g);
                }
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    total_loss *= inv_n;
    for g in total_grads.values_mut() {
        *g = g.map(|v| v * inv_n);
    }
    for (name, g) in &total_grads {
        if !g.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    if !total_loss.is_finite() {
        return Err(Error::Divergence("non-finite batch objective".into()));
    }
    clip_global_norm(&mut total_grads, cfg.clip_norm);
    adam_update(ps, &total_grads, opt, cfg)?;
    Ok(-total_loss)
}

/// Dequantize the first batch once and walk the stack, setting every
/// actnorm layer's parameters from the activations that reach it.
pub fn data_dependent_init(
    model: &FlowStack,
    deq: &Dequantizer,
    ps: &mut ParamStore,
    first_batch: &DiscreteData,
    rng: &mut impl Rng,
) -> Result<()> {
    if first_batch.len() == 0 {
        return Err(Error::Dataset("init batch is empty".into()));
    }
    let sample = deq.dequantize(first_batch, ps, rng)?;
    model.actnorm_init(ps, &sample.y, None)
}

/// Mean ELBO of a dataset averaged over `n_samples` noise draws per
/// example, in bits/dim.
pub fn validation_bpd(
    model: &FlowStack,
    deq: &Dequantizer,
    data: &DiscreteData,
    ps: &ParamStore,
    rng: &mut impl Rng,
    n_samples: usize,
) -> Result<f64> {
    let elbo = deq.elbo_t(model, data, ps, rng, n_samples)?;
    let mean = elbo.data().iter().sum::<f64>() / elbo.len() as f64;
    Ok(bits_per_dim(mean, data.dim()))
}

/// Noise draws averaged into the end-of-run train and validation
/// metrics; periodic in-training validation uses a single draw.
pub const FINAL_EVAL_SAMPLES: usize = 4;

/// Importance-weighted log-likelihood estimate in bits/dim:
/// logsumexp over `k` dequantization draws of `log p(x+u) - log q(u|x)`,
/// minus `log k`, averaged over examples.
pub fn importance_weighted_bpd(
    model: &FlowStack,
    deq: &Dequantizer,
    x: &DiscreteData,
    ps: &ParamStore,
    k: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "importance sampling needs k >= 1".into(),
        ));
    }
    let n = x.len();
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        weights.push(deq.log_weight_t(model, x, ps, rng)?);
    }
    let mut mean = 0.0;
    for i in 0..n {
        let max = weights
            .iter()
            .map(|w| w.data()[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = weights.iter().map(|w| (w.data()[i] - max).exp()).sum();
        mean += max + sum.ln() - (k as f64).ln();
    }
    mean /= n as f64;
    Ok(bits_per_dim(mean, x.dim()))
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub records: Vec<MetricsRecord>,
    pub final_train_bpd: f64,
    pub final_val_bpd: f64,
}

/// Salt namespaces for the dequantization stream: training draws,
/// validation draws, and bound-gap draws must not collide.
const SALT_TRAIN: u64 = 1;
const SALT_VAL: u64 = 1 << 40;
const SALT_GAP: u64 = 2 << 40;
pub const SALT_FINAL: u64 = 3 << 40;

/// Run the full loop: parameter init, data-dependent init, shuffled
/// minibatch epochs, periodic validation and bound-gap metrics. Every
/// step emits one `MetricsRecord` through `on_record` (and into the
/// returned outcome).
pub fn train(
    model: &FlowStack,
    deq: &Dequantizer,
    data: &DiscreteData,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, val_set) = split_dataset(data, cfg.seed)?;
    let d = data.dim();

    let mut ps = ParamStore::new();
    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT, 0);
    model.init_params(&mut ps, &mut init_rng);
    deq.init_params(&mut ps, &mut init_rng);

    let first_n = cfg.batch_size.min(train_set.len());
    let first: Vec<usize> = (0..first_n).collect();
    data_dependent_init(
        model,
        deq,
        &mut ps,
        &train_set.select(&first),
        &mut stream_rng(cfg.seed, STREAM_DEQUANT, 0),
    )?;

    let mut opt = AdamState::new();
    let mut records = Vec::new();
    let mut step = 0usize;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64 + 1));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let started = Instant::now();
            let batch = train_set.select(chunk);
            let mut step_rng = stream_rng(cfg.seed, STREAM_DEQUANT, SALT_TRAIN + step as u64);
            let nats = train_step(model, deq, &batch, &mut ps, &mut opt, cfg, &mut step_rng)?;

            let want_val = (cfg.val_every > 0 && step % cfg.val_every == 0) || step == total_steps;
            let bpd_val = if want_val {
                let mut val_rng = stream_rng(cfg.seed, STREAM_DEQUANT, SALT_VAL + step as u64);
                Some(validation_bpd(model, deq, &val_set, &ps, &mut val_rng, 1)?)
            } else {
                None
            };
            let gap = if cfg.gap_every > 0 && d <= 3 && step % cfg.gap_every == 0 {
                let mut gap_rng = stream_rng(cfg.seed, STREAM_DEQUANT, SALT_GAP + step as u64);
                Some(
                    bound_gap(
                        model,
                        deq,
                        &batch,
                        &ps,
                        &mut gap_rng,
                        cfg.gap_samples,
                        cfg.gap_grid,
                    )
                    .map_err(divergence_from)?,
                )
            } else {
                None
            };

            let record = MetricsRecord {
                step,
                nats,
                bpd_train: bits_per_dim(nats, d),
                bpd_val,
                gap,
                ms: started.elapsed().as_secs_f64() * 1e3,
            };
            on_record(&record);
            records.push(record);
        }
    }

    let mut final_rng = stream_rng(cfg.seed, STREAM_DEQUANT, SALT_FINAL);
    let final_val_bpd =
        validation_bpd(model, deq, &val_set, &ps, &mut final_rng, FINAL_EVAL_SAMPLES)?;
    let final_train_bpd =
        validation_bpd(model, deq, &train_set, &ps, &mut final_rng, FINAL_EVAL_SAMPLES)?;
    Ok(TrainOutcome {
        params: ps,
        records,
        final_train_bpd,
        final_val_bpd,
    })
}

/// Result of one ablation variant over one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub bpd_train: f64,
    pub bpd_val: f64,
    pub train_test_gap: f64,
}

/// Aggregated result of one ablation variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub params: usize,
    pub bpd_train: f64,
    pub bpd_val: f64,
    pub train_test_gap: f64,
    pub per_seed: Vec<SeedResult>,
    pub diverged: bool,
}

/// The four-variant comparison report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantResult>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// True when a variant diverged and the remaining work was skipped;
    /// the rows written so far are partial results.
    pub aborted: bool,
}

/// Train the full model and its three ablations with identical seeds
/// and epochs. Any divergence aborts the remaining work and flags the
/// report as partial.
pub fn run_ablation(
    data: &DiscreteData,
    model_spec: &ModelSpec,
    deq_spec: &DequantSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let shape = data.example_shape().to_vec();
    let variants = ablation_variants(model_spec, deq_spec, &shape)?;
    let mut report = AblationReport {
        variants: Vec::new(),
        seeds: seeds.to_vec(),
        epochs: cfg.epochs,
        aborted: false,
    };
    'variants: for variant in &variants {
        let model = build_model(&variant.model, &shape)?;
        let deq = build_dequantizer(&variant.deq, &shape)?;
        let mut row = VariantResult {
            name: variant.name.clone(),
            params: model.scalar_count() + deq.scalar_count(),
            bpd_train: 0.0,
            bpd_val: 0.0,
            train_test_gap: 0.0,
            per_seed: Vec::new(),
            diverged: false,
        };
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            match train(&model, &deq, data, &run_cfg, |_| {}) {
                Ok(outcome) => row.per_seed.push(SeedResult {
                    seed,
                    bpd_train: outcome.final_train_bpd,
                    bpd_val: outcome.final_val_bpd,
                    train_test_gap: outcome.final_val_bpd - outcome.final_train_bpd,
                }),
                Err(e) if numerical(&e) => {
                    row.diverged = true;
                    report.aborted = true;
                    report.variants.push(row);
                    break 'variants;
                }
                Err(e) => return Err(e),
            }
        }
        let k = row.per_seed.len() as f64;
        row.bpd_train = row.per_seed.iter().map(|s| s.bpd_train).sum::<f64>() / k;
        row.bpd_val = row.per_seed.iter().map(|s| s.bpd_val).sum::<f64>() / k;
        row.train_test_gap = row.per_seed.iter().map(|s| s.train_test_gap).sum::<f64>() / k;
        report.variants.push(row);
    }
    Ok(report)
}

/// Plain-text table of an ablation report: one line per variant with
/// validation bits/dim, parameter count, and the train-test gap.
pub fn format_ablation_table(report: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>12} {:>12} {:>10}\n",
        "ablation", "bits/dim", "train b/d", "parameters", "gap"
    ));
    for v in &report.variants {
        if v.diverged {
            out.push_str(&format!(
                "{:<24} {:>10} {:>12} {:>12} {:>10}\n",
                v.name, "diverged", "-", v.params, "-"
            ));
        } else {
            out.push_str(&format!(
                "{:<24} {:>10.4} {:>12.4} {:>12} {:>10.4}\n",
                v.name, v.bpd_val, v.bpd_train, v.params, v.train_test_gap
            ));
        }
    }
    if report.aborted {
        out.push_str("report aborted on divergence; rows above are partial results\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_toy2d;
    use crate::model::{build_dequantizer, build_model, LayerSpec};
    use crate::flows::split::SplitPattern;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            k: 3,
            filters: 4,
            blocks: 1,
            heads: 1,
            attention: false,
            layers: Some(vec![
                LayerSpec::Actnorm,
                LayerSpec::MixlogCoupling {
                    pattern: SplitPattern::Checkerboard { parity: 0 },
                },
                LayerSpec::MixlogCoupling {
                    pattern: SplitPattern::Checkerboard { parity: 1 },
                },
            ]),
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 2,
            val_every: 0,
            gap_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bits_per_dim_matches_the_definition() {
        assert_eq!(bits_per_dim(-10.0 * LN_2, 10), 1.0);
        assert!((bits_per_dim(-2129.35, 1024) - 3.0).abs() < 1e-4);
        assert_eq!(bits_per_dim(0.0, 5), 0.0);
        let nats = -3.7193;
        let d = 7;
        assert!((bits_per_dim(nats, d) - (-nats / (d as f64 * LN_2))).abs() < 1e-15);
    }

    #[test]
    fn split_is_deterministic_disjoint_and_ninety_ten() {
        let data = generate_toy2d(5, 200, 3).unwrap();
        let (tr1, va1) = split_dataset(&data, 9).unwrap();
        let (tr2, va2) = split_dataset(&data, 9).unwrap();
        assert_eq!(tr1.values(), tr2.values());
        assert_eq!(va1.values(), va2.values());
        assert_eq!(tr1.len(), 180);
        assert_eq!(va1.len(), 20);

        let (tr3, _) = split_dataset(&data, 10).unwrap();
        assert_ne!(tr1.values(), tr3.values());

        let mut together: Vec<u8> = tr1.values().to_vec();
        together.extend_from_slice(va1.values());
        let mut original = data.values().to_vec();
        together.sort_unstable();
        original.sort_unstable();
        assert_eq!(together, original);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = generate_toy2d(1, 64, 2).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &shape).unwrap();

        let mut ps = ParamStore::new();
        model.init_params(&mut ps, &mut stream_rng(0, STREAM_INIT, 0));
        data_dependent_init(
            &model,
            &deq,
            &mut ps,
            &data,
            &mut stream_rng(0, STREAM_DEQUANT, 0),
        )
        .unwrap();
        let before: Vec<(String, Vec<f64>)> = ps
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();

        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let mut opt = AdamState::new();
        let nats = train_step(
            &model,
            &deq,
            &data,
            &mut ps,
            &mut opt,
            &cfg,
            &mut stream_rng(0, STREAM_DEQUANT, 1),
        )
        .unwrap();
        assert!(nats.is_finite());
        for (name, old) in before {
            assert_eq!(ps.get(&name).data(), &old[..], "{name} moved");
        }
    }

    #[test]
    fn training_improves_the_elbo_on_a_small_dataset() {
        let values: Vec<u8> = (0..16).map(|i| [0u8, 1, 1, 2, 3, 3][i % 6]).collect();
        let data = DiscreteData::new(vec![16, 1, 1, 1], values, 2).unwrap();
        let spec = ModelSpec {
            layers: Some(vec![
                LayerSpec::Actnorm,
                LayerSpec::MixlogCoupling {
                    pattern: SplitPattern::Channel { parity: 1 },
                },
            ]),
            ..tiny_spec()
        };
        let model = build_model(&spec, &[1, 1, 1]).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &[1, 1, 1]).unwrap();

        let mut ps = ParamStore::new();
        model.init_params(&mut ps, &mut stream_rng(3, STREAM_INIT, 0));
        data_dependent_init(
            &model,
            &deq,
            &mut ps,
            &data,
            &mut stream_rng(3, STREAM_DEQUANT, 0),
        )
        .unwrap();

        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut opt = AdamState::new();
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..500 {
            let nats = train_step(
                &model,
                &deq,
                &data,
                &mut ps,
                &mut opt,
                &cfg,
                &mut stream_rng(3, STREAM_DEQUANT, 1 + step),
            )
            .unwrap();
            if step == 0 {
                first = nats;
            }
            last = nats;
        }
        assert!(
            last > first + 0.05,
            "500 steps should improve the ELBO: {first:.4} -> {last:.4}"
        );
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_loss_trajectory() {
        let data = generate_toy2d(2, 60, 2).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(
            &DequantSpec::Variational {
                k: 2,
                filters: 2,
                ctx_channels: 2,
            },
            &shape,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 27,
            epochs: 2,
            val_every: 3,
            gap_every: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&model, &deq, &data, &cfg, |_| {}).unwrap();
        let b = train(&model, &deq, &data, &cfg, |_| {}).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.nats, rb.nats, "wall clock may differ, losses may not");
            assert_eq!(ra.bpd_train, rb.bpd_train);
            assert_eq!(ra.bpd_val, rb.bpd_val);
            assert_eq!(ra.gap, rb.gap);
        }
        assert_eq!(a.final_val_bpd, b.final_val_bpd);
        for (name, value) in a.params.iter() {
            assert_eq!(value.data(), b.params.get(name).data());
        }
    }

    #[test]
    fn sharded_gradients_match_the_single_thread_result() {
        let data = generate_toy2d(4, 30, 3).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &shape).unwrap();

        let mut ps1 = ParamStore::new();
        model.init_params(&mut ps1, &mut stream_rng(7, STREAM_INIT, 0));
        data_dependent_init(
            &model,
            &deq,
            &mut ps1,
            &data,
            &mut stream_rng(7, STREAM_DEQUANT, 0),
        )
        .unwrap();
        let mut ps3 = ps1.clone();

        let single = TrainConfig {
            threads: 1,
            ..tiny_cfg()
        };
        let sharded = TrainConfig {
            threads: 3,
            ..tiny_cfg()
        };
        let mut opt1 = AdamState::new();
        let mut opt3 = AdamState::new();
        let n1 = train_step(
            &model,
            &deq,
            &data,
            &mut ps1,
            &mut opt1,
            &single,
            &mut stream_rng(7, STREAM_DEQUANT, 1),
        )
        .unwrap();
        let n3 = train_step(
            &model,
            &deq,
            &data,
            &mut ps3,
            &mut opt3,
            &sharded,
            &mut stream_rng(7, STREAM_DEQUANT, 1),
        )
        .unwrap();
        assert!((n1 - n3).abs() < 1e-12, "{n1} vs {n3}");
        for (name, value) in ps1.iter() {
            let other = ps3.get(name);
            for (a, b) in value.data().iter().zip(other.data()) {
                assert!((a - b).abs() < 1e-10, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_clipping_caps_the_global_norm() {
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::full(&[3], 4.0));
        grads.insert("b".to_string(), Tensor::full(&[4], 4.0));
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - (7.0f64 * 16.0).sqrt()).abs() < 1e-12);
        let after: f64 = grads
            .values()
            .flat_map(|g| g.data())
            .map(|&v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((after - 10.0).abs() < 1e-12);

        let mut small = HashMap::new();
        small.insert("a".to_string(), Tensor::full(&[2], 0.1));
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small["a"].data(), &[0.1, 0.1]);
    }

    #[test]
    fn actnorm_init_is_idempotent_on_the_same_batch() {
        let data = generate_toy2d(6, 64, 3).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &shape).unwrap();
        let mut ps = ParamStore::new();
        model.init_params(&mut ps, &mut stream_rng(0, STREAM_INIT, 0));

        let y = deq
            .dequantize(&data, &ps, &mut stream_rng(0, STREAM_DEQUANT, 0))
            .unwrap()
            .y;
        model.actnorm_init(&mut ps, &y, None).unwrap();
        let first: Vec<(String, Vec<f64>)> = ps
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        model.actnorm_init(&mut ps, &y, None).unwrap();
        for (name, old) in first {
            for (a, b) in old.iter().zip(ps.get(&name).data()) {
                assert!((a - b).abs() < 1e-9, "{name} drifted");
            }
        }
    }

    #[test]
    fn metrics_records_satisfy_the_bits_per_dim_identity() {
        let data = generate_toy2d(3, 50, 2).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &shape).unwrap();
        let cfg = TrainConfig {
            batch_size: 15,
            epochs: 1,
            val_every: 2,
            gap_every: 2,
            gap_samples: 4,
            gap_grid: 16,
            ..TrainConfig::default()
        };
        let out = train(&model, &deq, &data, &cfg, |_| {}).unwrap();
        assert_eq!(out.records.len(), 3);
        let d = data.dim();
        for r in &out.records {
            assert!((r.bpd_train - (-r.nats / (d as f64 * LN_2))).abs() < 1e-12);
            assert!(r.ms >= 0.0);
        }
        assert!(out.records.last().unwrap().bpd_val.is_some());
        assert!(out.records.iter().any(|r| r.gap.is_some()));
    }

    #[test]
    fn exploding_parameters_are_reported_as_divergence() {
        let data = generate_toy2d(0, 32, 2).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &shape).unwrap();
        let mut ps = ParamStore::new();
        model.init_params(&mut ps, &mut stream_rng(0, STREAM_INIT, 0));
        let scale_shape = ps.get("flow.0.scale").shape().to_vec();
        ps.set("flow.0.scale", Tensor::full(&scale_shape, 1e308))
            .unwrap();

        let mut opt = AdamState::new();
        let err = train_step(
            &model,
            &deq,
            &data,
            &mut ps,
            &mut opt,
            &tiny_cfg(),
            &mut stream_rng(0, STREAM_DEQUANT, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "got {err:?}");
    }

    #[test]
    fn importance_weighting_with_one_sample_is_a_single_elbo_draw() {
        let data = generate_toy2d(9, 40, 2).unwrap();
        let shape = data.example_shape().to_vec();
        let model = build_model(&tiny_spec(), &shape).unwrap();
        let deq = build_dequantizer(&DequantSpec::Uniform, &shape).unwrap();
        let mut ps = ParamStore::new();
        model.init_params(&mut ps, &mut stream_rng(1, STREAM_INIT, 0));
        data_dependent_init(
            &model,
            &deq,
            &mut ps,
            &data,
            &mut stream_rng(1, STREAM_DEQUANT, 0),
        )
        .unwrap();

        let iw = importance_weighted_bpd(
            &model,
            &deq,
            &data,
            &ps,
            1,
            &mut stream_rng(1, STREAM_DEQUANT, 77),
        )
        .unwrap();
        let elbo = deq
            .elbo_t(&model, &data, &ps, &mut stream_rng(1, STREAM_DEQUANT, 77), 1)
            .unwrap();
        let mean = elbo.data().iter().sum::<f64>() / elbo.len() as f64;
        assert!((iw - bits_per_dim(mean, data.dim())).abs() < 1e-12);
    }

    #[test]
    fn ablation_report_has_four_matched_rows() {
        let data = generate_toy2d(12, 40, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 18,
            epochs: 1,
            val_every: 0,
            gap_every: 0,
            ..TrainConfig::default()
        };
        let spec = ModelSpec {
            layers: None,
            ..tiny_spec()
        };
        let deq = DequantSpec::Variational {
            k: 2,
            filters: 2,
            ctx_channels: 2,
        };
        let report = run_ablation(&data, &spec, &deq, &cfg, &[0]).unwrap();
        assert!(!report.aborted);
        assert_eq!(report.variants.len(), 4);
        let names: Vec<&str> = report.variants.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "uniform dequantization",
                "affine coupling",
                "no self-attention",
                "full"
            ]
        );
        let expected = ablation_variants(&spec, &deq, data.example_shape()).unwrap();
        for (v, e) in report.variants.iter().zip(&expected) {
            let built = build_model(&e.model, data.example_shape()).unwrap().scalar_count()
                + build_dequantizer(&e.deq, data.example_shape())
                    .unwrap()
                    .scalar_count();
            assert_eq!(v.params, built, "{}", v.name);
            assert!(v.bpd_val.is_finite());
            assert_eq!(v.per_seed.len(), 1);
        }
        let table = format_ablation_table(&report);
        assert!(table.lines().count() >= 5);
        assert!(table.contains("full"));
    }
}
