use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// DensSiam: densely-connected Siamese tracker with self-attention.
#[derive(Debug, Parser)]
#[command(name = "denssiam", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON configuration file; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Checkpoint to track or evaluate with, or to resume training from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Output directory (output file for `track`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Seed for training, data generation and synthetic evaluation sets.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Dotted-path config override, e.g. `training.epochs=1`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the similarity network and write checkpoints and metrics.
    Train,
    /// Track a sequence directory from its first ground-truth box.
    Track {
        /// Directory with numbered frames and groundtruth.txt.
        sequence: PathBuf,
    },
    /// Run the reset-based protocol over a dataset.
    Eval {
        #[arg(long, value_enum, default_value = "siam")]
        tracker: TrackerKind,
        /// Root directory of sequence folders; synthetic sequences when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Self-contained verification suites.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Render a synthetic sequence to disk.
    Synth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackerKind {
    Siam,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Shapes,
    Grads,
    Props,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] denssiam_core::error::Error),
    #[error("{0}")]
    Usage(String),
    /// A verification suite or metric check did not pass.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use denssiam_core::error::Error;
        match self {
            CliError::Failed(_) => 1,
            CliError::Core(Error::NonFinite { .. } | Error::Contract(_)) => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn require<'a>(path: &'a Option<PathBuf>, flag: &str, command: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("`{command}` needs --{flag}")))
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train => commands::train(cli, require(&cli.out, "out", "train")?),
        Command::Track { sequence } => commands::track(
            cli,
            require(&cli.checkpoint, "checkpoint", "track")?,
            sequence,
            require(&cli.out, "out", "track")?,
        ),
        Command::Eval { tracker, dataset } => {
            commands::eval(cli, *tracker, dataset.as_deref(), require(&cli.out, "out", "eval")?)
        }
        Command::Verify { suite } => commands::verify(cli, *suite),
        Command::Synth => commands::synth(cli, require(&cli.out, "out", "synth")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
