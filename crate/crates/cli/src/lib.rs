//! `eedn` command-line driver.
//!
//! Exit codes: 0 on success, 1 when the invocation or config is invalid,
//! 2 when the run itself fails.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// A problem with the invocation or config, as opposed to a failed run.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "eedn",
    version,
    about = "Train and evaluate early-exit networks over frozen backbones"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as activation files
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Warm-up plus joint training; writes a checkpoint and a JSONL log
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides train.lambda
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Test-set metrics and per-gate usage of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory or manifest (default: <out>/checkpoint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit per-IM temperatures and conformal thresholds for a checkpoint
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One jointly trained model per cost weight; writes the curve
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cost weights
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Confidence-threshold and frozen-IM baselines
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Calibrate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

/// Merges flag > file > default and validates the result.
fn resolve(common: &Common, lambda: Option<f64>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(l) = lambda {
        cfg.train.lambda = l;
    }
    cfg.finalize()
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let lambda = match &cli.command {
        Command::Train { lambda, .. } | Command::Ablate { lambda, .. } => *lambda,
        _ => None,
    };
    let cfg = resolve(cli.command.common(), lambda)?;
    match cli.command {
        Command::Gen { .. } => commands::gen(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { checkpoint, .. } => commands::eval(&cfg, checkpoint),
        Command::Calibrate { checkpoint, .. } => commands::calibrate(&cfg, checkpoint),
        Command::Sweep { lambdas, .. } => commands::sweep(&cfg, lambdas),
        Command::Ablate { .. } => commands::ablate(&cfg),
    }
}

/// Exit code for a failed run: config and argument problems are 1,
/// everything else 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return EXIT_INVALID;
        }
        if let Some(e) = cause.downcast_ref::<eedn_core::Error>() {
            return match e {
                eedn_core::Error::Config(_) | eedn_core::Error::InvalidArgument(_) => EXIT_INVALID,
                _ => EXIT_FAILED,
            };
        }
    }
    EXIT_FAILED
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
