//! The `lstdq` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
//! or input error, 3 when `verify` finds failing rows.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lstdq_core::experiments::AuditSuite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<lstdq_core::Error> for CliError {
    fn from(e: lstdq_core::Error) -> Self {
        use lstdq_core::Error as E;
        match e {
            E::Io { .. } | E::Singular(_) | E::InsufficientData(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lstdq", version, about = "Linear off-policy evaluation lab: LSTDQ, coverage, sweeps and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Experiment configuration (JSON).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the MDP, policy, features, data distribution and (if configured) a dataset.
    Generate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Emit the coverage report as CSV.
    Coverage {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Dataset CSV for the empirical coverage column; defaults to sampling the `dataset` section.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run LSTDQ on a dataset and print the estimated return and empirical coverage.
    Estimate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Dataset CSV; defaults to sampling the `dataset` section.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the solution document here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the Monte-Carlo sweep from the `sweep` section.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Directory for `sweep_cells.csv` and `sweep_aggregates.csv`.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Audit the coverage identities on seeded random instances.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        /// Instances per suite.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Top-level seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (stdout when omitted).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Report both sides of the coverage comparison on the two-dimensional gap instance.
    Counterexample {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        gamma: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    TabularChi2,
    FeatureOccupancy,
    OnpolicyMean,
    SigmaMinComparison,
    Aggregation,
    BellmanComplete,
    Mwl,
    Exactness,
    Scale,
    All,
}

impl From<SuiteArg> for AuditSuite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::TabularChi2 => AuditSuite::TabularChi2,
            SuiteArg::FeatureOccupancy => AuditSuite::FeatureOccupancy,
            SuiteArg::OnpolicyMean => AuditSuite::OnpolicyMean,
            SuiteArg::SigmaMinComparison => AuditSuite::SigmaMinComparison,
            SuiteArg::Aggregation => AuditSuite::Aggregation,
            SuiteArg::BellmanComplete => AuditSuite::BellmanComplete,
            SuiteArg::Mwl => AuditSuite::Mwl,
            SuiteArg::Exactness => AuditSuite::Exactness,
            SuiteArg::Scale => AuditSuite::Scale,
            SuiteArg::All => AuditSuite::All,
        }
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    let result = match cli.command {
        Command::Generate { cfg, out } => commands::generate(&cfg.config, &out, &mut stdout),
        Command::Coverage { cfg, dataset, out } => commands::coverage(&cfg.config, dataset.as_deref(), out.as_deref(), &mut stdout),
        Command::Estimate { cfg, dataset, out } => commands::estimate(&cfg.config, dataset.as_deref(), out.as_deref(), &mut stdout),
        Command::Sweep { cfg, out } => commands::sweep(&cfg.config, &out, &mut stdout),
        Command::Verify { suite, seeds, seed, out } => commands::verify(suite.into(), seeds, seed, out.as_deref(), &mut stdout),
        Command::Counterexample { epsilon, gamma } => commands::counterexample(epsilon, gamma, &mut stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
