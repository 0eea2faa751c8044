//! The five workflows behind the CLI verbs, each returning either
//! success or a failure that carries its process exit code:
//! 1 for failed checks, 2 for usage and configuration problems,
//! 3 for numerical failures.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowkit_core::check::{format_check_table, run_checks, Defect};
use flowkit_core::dataio::{load_dataset, load_params, save_params, write_sample_grid, DatasetSpec};
use flowkit_core::dequant::DiscreteData;
use flowkit_core::math::BISECT_TOL;
use flowkit_core::model::{build_dequantizer, build_model, default_layers};
use flowkit_core::rng::{stream_rng, STREAM_DEQUANT, STREAM_SAMPLE};
use flowkit_core::training::{
    format_ablation_table, importance_weighted_bpd, run_ablation, split_dataset, train,
    SALT_FINAL,
};
use flowkit_core::{Error, Tensor};

use crate::config::RunConfig;

/// A command failure: what to print and what to exit with.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub type CmdResult = Result<(), Failure>;

fn config_failure(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn core_failure(e: Error) -> Failure {
    let code = match e {
        Error::Divergence(_) | Error::NonFinite { .. } | Error::ParamBlowUp(_) => 3,
        _ => 2,
    };
    Failure { code, message: e.to_string() }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    config_failure(format!("{}: {e}", path.display()))
}

/// Resolve the worker count: the config's request, capped by the
/// FLOWKIT_THREADS environment variable when set.
fn effective_threads(requested: usize) -> Result<usize, Failure> {
    match std::env::var("FLOWKIT_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(requested.max(1)),
        Err(e) => Err(config_failure(format!("FLOWKIT_THREADS: {e}"))),
        Ok(s) => {
            let cap: usize = s
                .trim()
                .parse()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| {
                    config_failure(format!(
                        "FLOWKIT_THREADS must be a positive integer, got {s:?}"
                    ))
                })?;
            Ok(requested.max(1).min(cap))
        }
    }
}

fn load_run(config_path: &Path) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(config_path).map_err(config_failure)?;
    cfg.train.threads = effective_threads(cfg.train.threads)?;
    Ok(cfg)
}

fn load_data(spec: &DatasetSpec) -> Result<DiscreteData, Failure> {
    load_dataset(spec).map_err(|e| match spec {
        DatasetSpec::TensorFile { path, .. } | DatasetSpec::ImageDir { path, .. } => {
            config_failure(format!("dataset {}: {e}", path.display()))
        }
        DatasetSpec::Toy2dMixture { .. } => config_failure(format!("dataset: {e}")),
    })
}

fn params_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("params")
}

pub fn cmd_train(config_path: &Path) -> CmdResult {
    let cfg = load_run(config_path)?;
    let data = load_data(&cfg.dataset)?;
    let shape = data.example_shape().to_vec();
    let model = build_model(&cfg.model, &shape).map_err(core_failure)?;
    let deq = build_dequantizer(&cfg.dequantizer, &shape).map_err(core_failure)?;

    fs::create_dir_all(&cfg.output).map_err(|e| io_failure(&cfg.output, e))?;
    let mut resolved = cfg.clone();
    if resolved.model.layers.is_none() {
        resolved.model.layers = Some(default_layers(&shape));
    }
    let config_copy = cfg.output.join("config.json");
    resolved.save(&config_copy).map_err(|e| io_failure(&config_copy, e))?;

    let outcome = train(&model, &deq, &data, &cfg.train, |rec| {
        if rec.step % 50 == 0 {
            eprintln!("step {:>5}  {:.4} bits/dim", rec.step, rec.bpd_train);
        }
    })
    .map_err(core_failure)?;

    let metrics_path = cfg.output.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| io_failure(&metrics_path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &outcome.records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_failure(&metrics_path, e))?;
    }
    w.flush().map_err(|e| io_failure(&metrics_path, e))?;

    let dir = params_dir(&cfg);
    save_params(&dir, &outcome.params).map_err(core_failure)?;

    println!(
        "trained {} steps: train {:.4} bits/dim, val {:.4} bits/dim",
        outcome.records.len(),
        outcome.final_train_bpd,
        outcome.final_val_bpd
    );
    println!(
        "wrote {}, {}, {}",
        config_copy.display(),
        metrics_path.display(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_eval(config_path: &Path, is_samples: i64) -> CmdResult {
    if is_samples < 1 {
        return Err(config_failure(format!(
            "--is-samples must be positive, got {is_samples}"
        )));
    }
    let cfg = load_run(config_path)?;
    let data = load_data(&cfg.dataset)?;
    let shape = data.example_shape().to_vec();
    let model = build_model(&cfg.model, &shape).map_err(core_failure)?;
    let deq = build_dequantizer(&cfg.dequantizer, &shape).map_err(core_failure)?;

    let dir = params_dir(&cfg);
    let mut names = model.param_names();
    names.extend(deq.param_names());
    let ps = load_params(&dir, &names)
        .map_err(|e| config_failure(format!("checkpoint {}: {e}", dir.display())))?;

    let (_, val) = split_dataset(&data, cfg.train.seed).map_err(core_failure)?;
    let mut rng = stream_rng(cfg.train.seed, STREAM_DEQUANT, SALT_FINAL);
    let bpd = importance_weighted_bpd(&model, &deq, &val, &ps, is_samples as usize, &mut rng)
        .map_err(core_failure)?;
    println!(
        "validation bits/dim at K={is_samples}: {bpd:.6} ({} examples)",
        val.len()
    );
    Ok(())
}

pub fn cmd_sample(config_path: &Path, n: usize, seed: u64) -> CmdResult {
    if n == 0 {
        return Err(config_failure("--n must be at least 1"));
    }
    let cfg = load_run(config_path)?;
    let data = load_data(&cfg.dataset)?;
    let shape = data.example_shape().to_vec();
    let model = build_model(&cfg.model, &shape).map_err(core_failure)?;

    let dir = params_dir(&cfg);
    let ps = load_params(&dir, &model.param_names())
        .map_err(|e| config_failure(format!("checkpoint {}: {e}", dir.display())))?;

    let mut rng = stream_rng(seed, STREAM_SAMPLE, 0);
    let started = Instant::now();
    let samples: Tensor = model.sample(&ps, &mut rng, n, BISECT_TOL).map_err(core_failure)?;
    let secs = started.elapsed().as_secs_f64();

    fs::create_dir_all(&cfg.output).map_err(|e| io_failure(&cfg.output, e))?;
    let ext = if samples.shape()[1] == 3 { "ppm" } else { "pgm" };
    let path = cfg.output.join(format!("samples.{ext}"));
    write_sample_grid(&samples, cfg.dataset.bit_depth(), &path).map_err(core_failure)?;

    println!("wrote {} ({n} samples, seed {seed})", path.display());
    println!(
        "sampling wall-clock: {secs:.3}s total, {:.3}s per batch of 8",
        secs / n as f64 * 8.0
    );
    Ok(())
}

pub fn cmd_check(
    config_path: &Path,
    filter: Option<&str>,
    defect: Option<&str>,
) -> CmdResult {
    let cfg = load_run(config_path)?;
    let defect = match defect {
        None => None,
        Some(name) => Some(
            name.parse::<Defect>()
                .map_err(|e| config_failure(e.to_string()))?,
        ),
    };
    let outcomes = run_checks(filter, defect, cfg.train.threads);
    if outcomes.is_empty() {
        return Err(config_failure(format!(
            "no checks match filter {:?}",
            filter.unwrap_or("")
        )));
    }
    print!("{}", format_check_table(&outcomes));
    let failing: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("failed properties: {}", failing.join(", ")),
        })
    }
}

pub fn cmd_ablate(config_path: &Path) -> CmdResult {
    let cfg = load_run(config_path)?;
    let data = load_data(&cfg.dataset)?;
    let seeds = [cfg.train.seed, cfg.train.seed + 1, cfg.train.seed + 2];
    let report = run_ablation(&data, &cfg.model, &cfg.dequantizer, &cfg.train, &seeds)
        .map_err(core_failure)?;

    fs::create_dir_all(&cfg.output).map_err(|e| io_failure(&cfg.output, e))?;
    let json_path = cfg.output.join("ablation.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| io_failure(&json_path, e))?;

    let table = format_ablation_table(&report);
    let table_path = cfg.output.join("ablation.txt");
    fs::write(&table_path, &table).map_err(|e| io_failure(&table_path, e))?;

    print!("{table}");
    println!("wrote {} and {}", json_path.display(), table_path.display());
    if report.aborted {
        Err(Failure {
            code: 3,
            message: "a variant diverged; the report is partial".into(),
        })
    } else {
        Ok(())
    }
}
