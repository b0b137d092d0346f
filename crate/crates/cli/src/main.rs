//! `sketchlaw` command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 sweep degraded by failed trials.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "sketchlaw", version, about = "Scaling-law laboratory for sketched linear regression trained by one-pass SGD")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config file; keys mirror the experiment config in snake_case.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: default, quick, paper-a2, paper-a3.
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "INT")]
    pub trials: Option<usize>,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, value_name = "INT")]
    pub threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the oracle suite and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_name = "CHECK")]
        inject_fault: Option<String>,
    },
    /// One full run: sample, train, decompose; writes decomposition.json.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Force W* = 0.
        #[arg(long)]
        zero_signal: bool,
    },
    /// Approximation error across sketch sizes.
    SweepM {
        #[command(flatten)]
        common: Common,
    },
    /// SGD excess risk across sample counts.
    SweepN {
        #[command(flatten)]
        common: Common,
        /// Evaluate bias + variance only, no SGD.
        #[arg(long)]
        theory_only: bool,
    },
    /// Kernel-regression experiment.
    Kernel {
        #[command(flatten)]
        common: Common,
        /// gaussian-synthetic or random-fourier.
        #[arg(long, value_name = "KIND")]
        feature_map: Option<String>,
    },
    /// Evaluate the scaling-law template without simulation.
    Predict {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        m: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Sample count; converted with N_eff = N / max(1, ln N).
        #[arg(long, conflicts_with = "n_eff")]
        n: Option<usize>,
        #[arg(long)]
        n_eff: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    VerificationFailed = 1,
    ConfigError = 2,
    Degraded = 3,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Verify { common, .. }
        | Command::Decompose { common, .. }
        | Command::SweepM { common }
        | Command::SweepN { common, .. }
        | Command::Kernel { common, .. } => common.quiet,
        Command::Predict { .. } => false,
    };
    env_logger::Builder::new()
        .filter_level(if quiet { log::LevelFilter::Error } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    let status = match commands::run(cli.command) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            e.status()
        }
    };
    ExitCode::from(status as u8)
}
