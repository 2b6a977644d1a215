//! `rinv` — one binary, five subcommands: synthetic data generation,
//! training, pruning-driven monomial selection, checkpoint evaluation,
//! and numerical verification of the core properties.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! abort, 4 verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rinv_core::selection::Algorithm;
use rinv_core::{Error, Result};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "rinv", version, about = "Rotation-invariant classification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic rotated-glyph dataset as IDX files.
    GenData {
        /// Output directory for images.idx and labels.idx.
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 24)]
        size: usize,
        /// Number of classes (round-robin labels).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per seed and write checkpoints, metrics and a summary.
    Train {
        /// Run configuration document.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated model init seeds.
        #[arg(long, default_value = "0")]
        seed: String,
        /// Artifact directory.
        #[arg(long)]
        out_dir: PathBuf,
        /// Train on a stratified fraction of the data, keeping the
        /// full-data iteration budget.
        #[arg(long)]
        subset: Option<f64>,
    },
    /// Run monomial selection and write the sidecar, pruned config and checkpoint.
    Prune {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured scoring algorithm.
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
        /// Override the initial pool size M.
        #[arg(long)]
        pool: Option<usize>,
        /// Override the final monomial count.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate checkpoints on an IDX dataset; several checkpoints aggregate.
    Eval {
        /// Checkpoint path; repeat for multi-seed aggregation.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Directory holding images.idx and labels.idx.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run numerical property suites and report PASS/FAIL per check.
    Verify {
        /// group | equivariance | invariance | ws-identity | gradients | all
        #[arg(long, default_value = "all")]
        suite: String,
        /// Probe a specific rotation order instead of the defaults.
        #[arg(long)]
        n_alpha: Option<usize>,
        /// Numeric precision; the suites are defined in 64-bit.
        #[arg(long, default_value = "f64")]
        precision: String,
    },
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    match s {
        "random" => Ok(Algorithm::Random),
        "magnitude" => Ok(Algorithm::Magnitude),
        "connectivity" => Ok(Algorithm::Connectivity),
        other => Err(format!(
            "unknown algorithm {other:?}; expected random, magnitude or connectivity"
        )),
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData {
            out,
            n,
            size,
            classes,
            seed,
        } => commands::gen_data(&out, n, size, classes, seed),
        Command::Train {
            config,
            seed,
            out_dir,
            subset,
        } => commands::cmd_train(&config, &seed, &out_dir, subset),
        Command::Prune {
            config,
            algorithm,
            pool,
            target,
            out_dir,
        } => commands::cmd_prune(&config, algorithm, pool, target, &out_dir),
        Command::Eval { checkpoint, data } => commands::cmd_eval(&checkpoint, &data),
        Command::Verify {
            suite,
            n_alpha,
            precision,
        } => commands::cmd_verify(&suite, n_alpha, &precision),
    }
}

fn exit_for(error: &Error) -> u8 {
    match error {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    rinv_core::parallel::init_threads_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_for(&error))
        }
    }
}
