//! Command-line front end for the sandwiched Volterra volatility library.

pub mod commands;
pub mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<svv_core::Error> for CliError {
    fn from(e: svv_core::Error) -> Self {
        use svv_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) | E::Assumption { .. } => CliError::Validation(msg),
            E::Io(_) => CliError::Io(msg),
            _ => CliError::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "svv", version, about = "Sandwiched Volterra volatility experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate variance paths and write them with boundedness diagnostics.
    Simulate(Common),
    /// Compare Malliavin derivative fields with finite bumps and check the explosion statistic.
    MalliavinCheck(Common),
    /// Hölder certificate over grid refinements and the short-maturity constant.
    KernelCheck(Common),
    /// ATM skew term structure, power-law fit and limit ratio.
    Skew(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Antithetic pairs in pricing.
    #[arg(long)]
    pub antithetic: bool,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

/// Resolved inputs shared by every subcommand.
pub struct Context {
    pub config: RunConfig,
    pub config_dir: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub antithetic: bool,
    pub force: bool,
}

impl Context {
    pub fn from_args(args: &Common) -> Result<Self, CliError> {
        let config = RunConfig::load(&args.config)?;
        let seed = args
            .seed
            .or(config.seed)
            .ok_or_else(|| CliError::Validation("seed: missing; set it in the config or pass --seed".into()))?;
        let out =
            args.out.clone().or_else(|| config.output_dir.clone()).ok_or_else(|| {
                CliError::Validation("output_dir: missing; set it in the config or pass --out".into())
            })?;
        let config_dir = args.config.parent().map(PathBuf::from).unwrap_or_default();
        Ok(Context {
            antithetic: args.antithetic || config.skew.antithetic,
            config,
            config_dir,
            seed,
            out,
            force: args.force,
        })
    }
}

/// Runs one subcommand and returns its human-readable summary.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let (args, cmd): (&Common, fn(&Context) -> Result<String, CliError>) = match &cli.command {
        Command::Simulate(a) => (a, commands::simulate),
        Command::MalliavinCheck(a) => (a, commands::malliavin_check),
        Command::KernelCheck(a) => (a, commands::kernel_check),
        Command::Skew(a) => (a, commands::skew),
    };
    if args.threads == Some(0) {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    let ctx = Context::from_args(args)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = args.threads {
        pool = pool.num_threads(k);
    }
    let pool = pool.build().map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    pool.install(|| cmd(&ctx))
}
