//! `minvar`: price, hedge and verify European claims under minimal-variance
//! hedging.
//!
//! Exit codes: 0 success, 1 numerical failure or failed hard check, 2 usage
//! or input error.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "minvar", version, about = "Minimal-variance pricing and hedging in jump-diffusion markets")]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Price a claim by one or more methods and report a JSON summary.
    Price(PriceArgs),
    /// Write the per-node hedge table of sampled paths as CSV.
    Hedge(HedgeArgs),
    /// Run the invariant checks and report pass/fail per check as JSON.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct Common {
    /// Market specification (JSON).
    #[arg(long)]
    pub market: PathBuf,
    /// Claim specification (JSON).
    #[arg(long)]
    pub claim: PathBuf,
    /// Grid steps; defaults to the market file's `n_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, env = "MINVAR_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Direct,
    EmmStar,
    ClosedForm,
    Theorem1,
    Oracle,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct PriceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: u64,
    /// Pricing method; repeat for several. Defaults to direct and emm-star.
    #[arg(long = "method", value_enum)]
    pub methods: Vec<MethodArg>,
    /// Depth of the moment-matched tree for the oracle method.
    #[arg(long, default_value_t = 3)]
    pub tree_depth: usize,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct HedgeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of sampled paths in the table.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: u64,
    /// Initial wealth; defaults to the minimal-variance price.
    #[arg(long)]
    pub z: Option<f64>,
}

#[derive(Debug, Clone, Args, serde::Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 20_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: u64,
    #[arg(long, default_value_t = 3)]
    pub tree_depth: usize,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(minvar::Error),
    Failed(String),
}

impl From<minvar::Error> for CliError {
    fn from(e: minvar::Error) -> Self {
        CliError::Numeric(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) | CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numeric(e) => write!(f, "numerical failure: {e}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("usage error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().expect("thread pool is configured once");
    }
    let result = match &cli.command {
        Command::Price(a) => commands::price(a),
        Command::Hedge(a) => commands::hedge(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("minvar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
