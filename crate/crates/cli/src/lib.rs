//! Command-line front end: configuration loading, command dispatch and
//! CSV output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{EquivalenceReport, Outcome};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "qbm", version, about = "Damped oscillator master-equation coefficients and propagation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the kernel equations and write the coefficient table.
    Coeffs(Common),
    /// Compare the integral-equation and Green's-function constructions.
    CheckEquivalence {
        #[command(flatten)]
        common: Common,
        /// Largest accepted max|A - B| / max|A|.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Propagate the initial state in the Fock basis and in moments.
    Evolve(Common),
    /// Run the stochastic trajectory ensemble.
    Sample(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.directory`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Base seed for trajectories (overrides `mc.base_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Coeffs(c) | Self::Evolve(c) | Self::Sample(c) => c,
            Self::CheckEquivalence { common, .. } => common,
        }
    }
}

/// Loads the configuration with command-line overrides applied.
pub fn effective_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output.directory = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.mc.base_seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let common = cli.command.common();
    let cfg = effective_config(common)?;
    let go = || match &cli.command {
        Command::Coeffs(_) => commands::cmd_coeffs(&cfg),
        Command::CheckEquivalence { tolerance, .. } => commands::cmd_check_equivalence(&cfg, *tolerance),
        Command::Evolve(_) => commands::cmd_evolve(&cfg),
        Command::Sample(_) => commands::cmd_sample(&cfg),
    };
    match common.threads {
        Some(0) => Err(CliError::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(go),
        None => go(),
    }
}
