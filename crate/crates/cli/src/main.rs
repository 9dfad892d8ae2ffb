//! `rotorsim` — command-line front end for the planar-rotor decoherence
//! toolkit.
//!
//! Each subcommand reads a `key = value` configuration file, runs one
//! simulation pipeline, and writes CSV artifacts stamped with the
//! configuration hash and seed. Exit codes: 0 success, 2 configuration
//! error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::AppError;
use config::{Engine, RunConfig};

#[derive(Parser)]
#[command(
    name = "rotorsim",
    about = "Orientational decoherence of a noisy planar rotor: diffusion, \
             resonance, echo interferometry, and scaling pipelines",
    version
)]
struct Cli {
    /// Configuration file (`key = value` lines; see the repository README)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the master seed from the configuration
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the output directory from the configuration
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the evolution engine
    #[arg(long, global = true, value_name = "ENGINE",
          value_parser = ["lindblad", "trajectory"])]
    engine: Option<String>,

    /// Worker threads (0 = one per core); results are identical either way
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    threads: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evolve a packet and fit the linear growth of Var(L_z)
    Diffusion,
    /// Sweep the drive filter center across 2*omega_rot and fit the line
    Resonance,
    /// Echo interferometry: contrast versus hold time per sideband order
    Ramsey,
    /// Decay-rate scaling in sideband order and diffusion strength
    Scaling,
    /// Run the built-in closed-form and cross-route invariant checks
    Validate,
}

/// Load the configuration and fold the command-line overrides into it.
fn load_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let path = cli.config.as_ref().ok_or_else(|| {
        AppError::Config("this command needs --config PATH".into())
    })?;
    let mut cfg = RunConfig::load(path).map_err(AppError::Config)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(engine) = &cli.engine {
        cfg.engine = Engine::parse(engine)
            .ok_or_else(|| AppError::Config(format!("unknown engine '{engine}'")))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), AppError> {
    let out = cli.out.as_deref();
    match cli.command {
        Cmd::Validate => commands::cmd_validate(),
        Cmd::Diffusion => commands::cmd_diffusion(&load_config(cli)?, out),
        Cmd::Resonance => commands::cmd_resonance(&load_config(cli)?, out),
        Cmd::Ramsey => commands::cmd_ramsey(&load_config(cli)?, out),
        Cmd::Scaling => commands::cmd_scaling(&load_config(cli)?, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build();
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: could not build the worker pool: {e}");
            return ExitCode::from(2);
        }
    };

    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AppError::Config(_) => ExitCode::from(2),
                AppError::Numerical(_) => ExitCode::from(3),
            }
        }
    }
}
