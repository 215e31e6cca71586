//! `qtraj`: simulate, reconstruct and fit weak-measurement qubit trajectories.
//!
//! Every subcommand takes `--config=FILE` and any number of `--key=value`
//! overrides of the configuration (dotted keys for tables). The resolved
//! configuration is written to `manifest.toml` in the output directory and can
//! be passed back as `--config` to reproduce the run bit for bit.
//!
//! `QTRJ_THREADS` sets the worker thread count; results do not depend on it.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};

use crate::config::Mode;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "qtraj", version, about = "Weak-measurement qubit trajectory pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// `--config=FILE` and `--key=value` settings, e.g. `--seed=1 --model.x0=0.5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    settings: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic measurement records and their latent trajectories.
    Generate(Overrides),
    /// Monte Carlo trajectory ensemble and histograms.
    Simulate(Overrides),
    /// Fokker-Planck density at the requested times.
    SolveFp(Overrides),
    /// Trajectories reconstructed from a record file.
    Reconstruct(Overrides),
    /// Per-slice tau fit of reconstructed histograms.
    Fit(Overrides),
    /// Current centres, spread and T1 from eigenstate-prepared records.
    Calibrate(Overrides),
    /// Observed, best-fit and infinite-T1 histogram tables.
    Report(Overrides),
    /// Runs the mode named in the configuration.
    Run(Overrides),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("QTRJ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("QTRJ_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Generate(a) => (Some(Mode::Generate), a),
        Command::Simulate(a) => (Some(Mode::Simulate), a),
        Command::SolveFp(a) => (Some(Mode::SolveFp), a),
        Command::Reconstruct(a) => (Some(Mode::Reconstruct), a),
        Command::Fit(a) => (Some(Mode::Fit), a),
        Command::Calibrate(a) => (Some(Mode::Calibrate), a),
        Command::Report(a) => (Some(Mode::Report), a),
        Command::Run(a) => (None, a),
    };
    let result = init_threads()
        .and_then(|_| config::resolve(mode, &args.settings))
        .and_then(|cfg| commands::execute(&cfg));
    if let Err(e) = result {
        log::error!("{e}");
        std::process::exit(e.exit_code());
    }
}
