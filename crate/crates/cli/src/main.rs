//! `fgl` — a desk-scale laboratory for pretraining and finetuning small
//! dialogue models. The workflow is `prepare` → `pretrain` → `finetune` →
//! `probe`/`chat`/`export`; every command reads the same TOML configuration
//! (`--config`) with flags taking precedence, and writes under one output
//! root (`--out`, `out_dir`, or `$FGL_OUT`).
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, bad config,
//! mismatched strategy), 2 for runtime failures (missing files, training
//! errors, a locked output directory).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod chat;
mod config;
mod export;
mod prepare;
mod probe;
mod train;
mod workspace;

use config::{Overrides, Stage};

/// An error in how the tool was invoked (exit code 1), as opposed to a
/// failure while doing the work (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// `return Err(UsageError(...))` with format-string ergonomics.
macro_rules! usage {
    ($($arg:tt)*) => {
        return Err($crate::UsageError(format!($($arg)*)).into())
    };
}
pub(crate) use usage;

#[derive(Parser)]
#[command(
    name = "fgl",
    version,
    about = "Pretrain, finetune, and probe desk-scale dialogue models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the tokenizer and encode the configured corpora into caches.
    Prepare {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train from random initialization on the pretraining corpus.
    Pretrain {
        #[command(flatten)]
        overrides: Overrides,
        /// Continue an interrupted run from its last checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Adapt a model to the dialogue corpus (standard, mix-review, wd-pre,
    /// mix-train, or scratch-baseline).
    Finetune {
        #[command(flatten)]
        overrides: Overrides,
        /// Pretrained starting point: a run directory or checkpoint file.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Continue an interrupted run from its last checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints with behavior probes and write JSON reports.
    Probe {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint file or run directory; repeat for several.
        #[arg(long, value_name = "PATH", required = true)]
        checkpoint: Vec<PathBuf>,
        /// Comma-separated subset of: ppl, sensitivity, knowledge,
        /// diversity, projection. Default: all of them.
        #[arg(long, value_name = "LIST")]
        probes: Option<String>,
    },
    /// Talk to a trained model; :reset :seed N :k N :quit inside.
    Chat {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint file or run directory to load.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Render traces and probe reports as CSV tables and SVG plots.
    Export {
        #[command(flatten)]
        overrides: Overrides,
        /// A trace.jsonl written by pretrain/finetune; repeatable.
        #[arg(long = "trace", value_name = "PATH")]
        traces: Vec<PathBuf>,
        /// A probe report JSON; repeatable.
        #[arg(long = "report", value_name = "PATH")]
        reports: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare { overrides } => prepare::run(&overrides),
        Command::Pretrain { overrides, resume } => train::run(
            Stage::Pretrain,
            &overrides,
            None,
            resume.map(|p| train::resume_file(&p)).as_deref(),
        ),
        Command::Finetune {
            overrides,
            checkpoint,
            resume,
        } => train::run(
            Stage::Finetune,
            &overrides,
            checkpoint.map(|p| train::checkpoint_file(&p)).as_deref(),
            resume.map(|p| train::resume_file(&p)).as_deref(),
        ),
        Command::Probe {
            overrides,
            checkpoint,
            probes,
        } => probe::run(&overrides, &checkpoint, probes.as_deref()),
        Command::Chat {
            overrides,
            checkpoint,
        } => chat::run(&overrides, &checkpoint),
        Command::Export {
            overrides,
            traces,
            reports,
        } => export::run(&overrides, &traces, &reports),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
