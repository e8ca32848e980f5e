//! Experiment driver for heat smoothing: training, smoothing, certification,
//! attacks, oracle checks, reports and timing.
//!
//! Every command writes into a run directory holding its artifacts, the
//! resolved config echo (`config.toml`) and `manifest.json` with the seed,
//! tool version and SHA-256 hashes of inputs and outputs.

pub mod commands;
pub mod config;
pub mod parallel;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "heatsmooth", version, about = "Heat-equation smoothing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `smoothing.sigma=0.25`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory; defaults to `<output_dir>/<command>`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Worker threads for per-example work; 1 is the serial reference mode.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a baseline (or noise-augmented) classifier from scratch.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Smooth a trained model with the configured variant.
    Smooth {
        #[command(flatten)]
        common: Common,
        /// Model file (`model.json` from a train or smooth run).
        #[arg(long)]
        model: PathBuf,
    },
    /// Certify test examples in every configured mode.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Model file (`model.json` from a train or smooth run).
        #[arg(long)]
        model: PathBuf,
    },
    /// Run l2 attacks on the labeled test set.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Model file (`model.json` from a train or smooth run).
        #[arg(long)]
        model: PathBuf,
    },
    /// Check heat flow, convolution and Monte Carlo smoothing against each other.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Use deliberately coarse grids.
        #[arg(long)]
        coarse: bool,
    },
    /// Collect certify and attack runs into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Certify and attack run directories to include.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Time single-pass inference against noisy ensembles.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Model file (`model.json` from a train or smooth run).
        #[arg(long)]
        model: PathBuf,
    },
    /// Print the resolved config.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

/// Process exit status for a failed command: 2 for numerical failures
/// (divergence, instability), 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<heatsmooth::Error>())
        .any(|e| e.is_numerical());
    if numerical {
        2
    } else {
        1
    }
}

/// Runs a parsed command line and returns the text to print on success.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    use commands::*;
    match cli.command {
        Command::Train { common } => cmd_train(&Ctx::new(&common, "train")?),
        Command::Smooth { common, model } => cmd_smooth(&Ctx::new(&common, "smooth")?, &model),
        Command::Certify { common, model } => cmd_certify(&Ctx::new(&common, "certify")?, &model),
        Command::Attack { common, model } => cmd_attack(&Ctx::new(&common, "attack")?, &model),
        Command::OracleCheck { mut common, coarse } => {
            if coarse {
                let mut sets = vec![
                    "oracle.resolution_1d=64".to_string(),
                    "oracle.resolution_2d=16".to_string(),
                    "oracle.convergence_cells=[4, 8, 16]".to_string(),
                ];
                sets.append(&mut common.overrides);
                common.overrides = sets;
            }
            cmd_oracle_check(&Ctx::new(&common, "oracle-check")?)
        }
        Command::Report { common, runs } => cmd_report(&Ctx::new(&common, "report")?, &runs),
        Command::Bench { common, model } => cmd_bench(&Ctx::new(&common, "bench")?, &model),
        Command::ShowConfig { common } => {
            Ok(ExperimentConfig::load(common.config.as_deref(), &common.overrides)?.to_toml())
        }
    }
}
