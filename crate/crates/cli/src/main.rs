//! flowkit: exact-likelihood density modeling with coupling flows and
//! variational dequantization, sized for a single desk machine.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "flowkit",
    version,
    about = "Train, evaluate, sample, and verify coupling-flow density models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; write metrics, parameters, and the resolved config
    Train {
        /// Path to the run's JSON config
        config: PathBuf,
    },
    /// Report validation bits/dim using importance-weighted dequantization
    Eval {
        /// Path to the run's JSON config
        config: PathBuf,
        /// Importance samples per example
        #[arg(long = "is-samples", default_value_t = 1)]
        is_samples: i64,
    },
    /// Draw samples from a trained model into an image grid
    Sample {
        /// Path to the run's JSON config
        config: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Sampling seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the named verification suite
    Check {
        /// Path to the run's JSON config
        config: PathBuf,
        /// Only run checks whose name contains this substring
        #[arg(long)]
        filter: Option<String>,
        /// Inject a named defect into the harness's drive of the library
        #[arg(long)]
        defect: Option<String>,
    },
    /// Train the model and its ablations with matched parameter counts
    Ablate {
        /// Path to the run's JSON config
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => commands::cmd_train(config),
        Command::Eval { config, is_samples } => commands::cmd_eval(config, *is_samples),
        Command::Sample { config, n, seed } => commands::cmd_sample(config, *n, *seed),
        Command::Check { config, filter, defect } => {
            commands::cmd_check(config, filter.as_deref(), defect.as_deref())
        }
        Command::Ablate { config } => commands::cmd_ablate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
