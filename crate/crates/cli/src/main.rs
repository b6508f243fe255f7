//! `pdprune`: plan and simulate block and KV-cache pruning for split
//! prefill/decode inference.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "pdprune",
    version,
    about = "Block and KV-cache pruning for prefill/decode split inference"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint; defaults to `<out>/model.bin`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Search seed; beats PDPRUNE_SEED, which beats the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of a summary.
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Annealing schedule as `T0,alpha,T_min`.
    #[arg(long, global = true, value_parser = config::parse_schedule)]
    schedule: Option<(f64, f64, f64)>,
    #[arg(long, global = true)]
    d_threshold: Option<f64>,
    /// Prefill-keep threshold (absolute accuracy).
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// KV retention ratio per end.
    #[arg(long, global = true)]
    p: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Number of KV-pruned layers.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    timeout_ms: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Redundancy profile and candidate sets; trains the toy model unless --model is given.
    Analyze,
    /// Annealing search and prefill/decode split.
    Search {
        /// Also enumerate every subset and record agreement.
        #[arg(long)]
        oracle: bool,
    },
    /// Train merged blocks for the plan's distill elements.
    Distill,
    /// Pick KV-pruned layers from calibration attention.
    KvSelect,
    /// Two-node run over the wire format.
    Simulate {
        /// Fail unless the run matches the single-process reference.
        #[arg(long)]
        check_oracle: bool,
    },
    /// Full and pruned transfer volume.
    Bandwidth,
    /// Run the self-check suite.
    Verify {
        /// Directory with the shipped scenario files.
        #[arg(long, default_value = "scenarios")]
        scenarios: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli.common, &cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
