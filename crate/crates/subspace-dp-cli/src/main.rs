//! Batch curator workflow: read a counts CSV, declare the sums that must
//! stay exact, add calibrated noise everywhere else, and write the
//! sanitized table back out with reproducible metadata.
//!
//! Every command is deterministic given its flags; `--seed` is mandatory
//! so nothing ever runs on implicit entropy. Exit codes: 2 for parse or
//! validation problems (clap uses the same code for flag errors), 3 for
//! mechanism failures, 4 when a distributed aggregate disagrees.

mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// A failure carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn mechanism(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }

    pub fn aggregate(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "subspace-dp",
    version,
    about = "Differentially private table releases that keep declared sums exact"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sanitize a counts table under exact-sum invariants.
    Release(ReleaseArgs),
    /// Statistical audits: moment checks, bias regressions, ratio probe.
    Audit(AuditArgs),
    /// Multi-agent run with bit-exact comparison against the centralized
    /// release.
    Distributed(DistributedArgs),
    /// Canned synthetic demonstrations (census counties, campus
    /// occupancy).
    Demo(DemoArgs),
}

/// Dataset flags shared by the table-driven commands.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Input CSV (UTF-8, header row required).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Comma-separated categorical key columns, in axis order.
    #[arg(long, value_delimiter = ',')]
    pub keys: Vec<String>,
    /// Numeric value column holding the counts.
    #[arg(long)]
    pub value: Option<String>,
    /// Invariant clause `exact-sum group-by <axes>`; an empty axis list
    /// keeps the grand total. Repeatable.
    #[arg(long = "invariant")]
    pub invariants: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ReleaseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// One of projected-gaussian, extended-gaussian, projected-laplace,
    /// extended-laplace, correlated-gaussian.
    #[arg(long)]
    pub mechanism: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Required for the Gaussian-family mechanisms.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Noise seed; identical flags + seed reproduce the release bitwise.
    #[arg(long)]
    pub seed: u64,
    /// Sanitized CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Release metadata JSON destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Clip negative sanitized counts to zero. Destroys unbiasedness and
    /// usually the invariants; a loud warning is printed.
    #[arg(long)]
    pub clip_negative: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckKind {
    /// Mean / MSE / covariance / invariant moment audit.
    Moments,
    /// Alias for `moments` focused reporting is the same.
    Mse,
    /// Error-vs-log-truth bias regressions.
    Bias,
    /// Binned likelihood-ratio probe (needs a one-dimensional null
    /// space).
    Ratio,
}

#[derive(Args, Debug, Clone)]
pub struct AuditArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub mechanism: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Repetitions (releases) for the chosen check.
    #[arg(long, visible_alias = "runs", default_value_t = 1000)]
    pub repetitions: usize,
    #[arg(long, value_enum, default_value_t = CheckKind::Moments)]
    pub check: CheckKind,
    /// Audit report JSON destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also accumulate the full error covariance (quadratic in table
    /// size; meant for small tables).
    #[arg(long)]
    pub covariance: bool,
    /// Write per-run error vectors to this CSV (for external boxplots).
    #[arg(long)]
    pub per_run_out: Option<PathBuf>,
    /// Bias check only: analyze an external CSV with `true,released`
    /// columns instead of running a mechanism.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Ratio probe only: flat cell index incremented to form the
    /// neighboring table.
    #[arg(long, default_value_t = 0)]
    pub neighbor_cell: usize,
    /// Ratio probe only: histogram bins over the pooled central range.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Ratio probe only: minimum hits per side for a bin to count.
    #[arg(long, default_value_t = 500)]
    pub min_hits: usize,
}

#[derive(Args, Debug, Clone)]
pub struct DistributedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub mechanism: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Number of agents; cells are split into that many contiguous
    /// blocks.
    #[arg(long)]
    pub agents: usize,
    /// Aggregate sanitized CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Agent report JSON destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Fault injection `agent=K`: agent K runs with a desynchronized
    /// seed, which must be detected (exit 4).
    #[arg(long)]
    pub inject_seed_fault: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DemoKind {
    /// 102 synthetic county populations under an exact state total.
    Census,
    /// 14 x 24 x 20 occupancy table under two exact marginals.
    Campus,
}

#[derive(Args, Debug, Clone)]
pub struct DemoArgs {
    #[arg(value_enum)]
    pub which: DemoKind,
    /// Directory for the generated input and output files.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

fn init_thread_pool() {
    if let Ok(raw) = std::env::var("SUBSPACE_DP_THREADS") {
        if let Ok(threads) = raw.parse::<usize>() {
            if threads > 0 {
                // Ignore "already initialized": tests may touch rayon
                // first.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Release(args) => commands::release(&args),
        Command::Audit(args) => commands::audit(&args),
        Command::Distributed(args) => commands::distributed(&args),
        Command::Demo(args) => commands::demo(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
