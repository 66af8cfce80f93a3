//! Command-line driver for DeCIL experiments.
//!
//! Every command takes a JSON [`ExperimentConfig`](config::ExperimentConfig),
//! writes its outputs under the config's `output_dir` together with a copy of
//! the resolved config, and exits with 0 on success, 1 on a runtime or
//! numeric failure and 2 on a usage or config error.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use decil_core::models::ModelKind;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Environment variable capping the worker threads used by sweeps.
pub const THREADS_ENV: &str = "DECIL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "decil",
    version,
    about = "Denoising-based contractive imitation learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config field, e.g. `train.sigma=0.2`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the expert dataset.
    GenData(Common),
    /// Train one model on the dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// dynamics, denoiser, bc, noisy_bc or joint.
        #[arg(long)]
        kind: String,
    },
    /// Roll out trained policies under observation noise.
    Evaluate(Common),
    /// Sensitivity-ratio sweep over training noise levels.
    Fig2(Common),
    /// DeCIL against the joint baseline with paired seeds.
    Ablation(Common),
    /// Numerical checks of the contraction argument.
    Audit(Common),
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // A pool built earlier in the same process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load(common: &Common) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load(&common.config, &common.overrides, common.seed, common.out.as_deref())
}

fn dispatch(command: Command) -> CliResult<String> {
    configure_threads()?;
    match command {
        Command::GenData(c) => commands::cmd_gen_data(&load(&c)?),
        Command::Train { common, kind } => {
            let kind: ModelKind = kind
                .parse()
                .map_err(|e: decil_core::Error| CliError::Usage(e.to_string()))?;
            commands::cmd_train(&load(&common)?, kind)
        }
        Command::Evaluate(c) => commands::cmd_evaluate(&load(&c)?),
        Command::Fig2(c) => commands::cmd_fig2(&load(&c)?),
        Command::Ablation(c) => commands::cmd_ablation(&load(&c)?),
        Command::Audit(c) => commands::cmd_audit(&load(&c)?),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
