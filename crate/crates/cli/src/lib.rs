//! Command-line front end for LAF model fitting, online updating, forecasting
//! and baseline comparisons.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod io;
pub mod manifest;

/// Bad flags, config keys or values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(
    name = "laf",
    version,
    about = "Locally adaptive factor processes for time-varying means and covariances"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    /// Bumps loadings dictionary, p = 5.
    A,
    /// Smooth GP loadings dictionary, p = 10.
    B,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its true mean and covariance paths.
    Simulate {
        #[arg(long, value_enum, ignore_case = true)]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also continue the paths for this many steps (written as data_new.csv).
        #[arg(long = "continue", value_name = "STEPS")]
        continue_steps: Option<usize>,
    },
    /// Run the Gibbs sampler and write posterior summaries.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Update a fitted model with new observations, static parameters held fixed.
    Update {
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        new_data: PathBuf,
        /// Number of fitted observations re-processed before the new data.
        #[arg(long)]
        warmstart: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to FITTED/update.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast the next steps; with realized data, also score one-step predictions.
    Predict {
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long)]
        horizon: usize,
        /// Observations after the fitted sample, used for one-step errors.
        #[arg(long)]
        realized: Option<PathBuf>,
        #[arg(long)]
        warmstart: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to FITTED/predict.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split-chain PSRF and autocorrelation of the stored traces.
    Diagnose {
        #[arg(long)]
        fitted: PathBuf,
        #[arg(long, default_value_t = 6)]
        segments: usize,
    },
    /// EWMA benchmark with moving-average means.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// Directory with truth_mu.csv and truth_sigma.csv; enables lambda selection.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// A fit directory whose summaries join the error table.
        #[arg(long)]
        fitted: Option<PathBuf>,
        /// Smoothing parameter when no truth is given.
        #[arg(long, default_value_t = 0.97)]
        lambda: f64,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<laf_core::Error>() {
            return match e {
                laf_core::Error::Config(_) => 1,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
    }
    2
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
