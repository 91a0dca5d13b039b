//! `headgan-lab`: synth, train, reenact, eval and preview.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headgan_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const RUNTIME: u8 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(e) => match e {
                CoreError::Config { .. } | CoreError::UnknownConfigKey(_) => exit::CONFIG,
                CoreError::Io { .. }
                | CoreError::Format(_)
                | CoreError::Image(_)
                | CoreError::CheckpointMismatch(_) => exit::DATA,
                _ => exit::RUNTIME,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "headgan-lab",
    version,
    about = "Audio-and-3D driven head reenactment lab"
)]
struct Cli {
    /// Worker threads; 1 gives bitwise-deterministic output.
    #[arg(long, global = true, env = "HEADGAN_LAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train the generator and discriminators.
    Train(TrainArgs),
    /// Drive a source frame with another sequence's motion and audio.
    Reenact(ReenactArgs),
    /// Compute CSIM, FID, FVD and AED.
    Eval(EvalArgs),
    /// Render frame grids and loss curves as PNG.
    Preview(PreviewArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub num_sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; unlisted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the `steps` key.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct ReenactArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence container whose reference frame gives the identity.
    #[arg(long)]
    pub source: PathBuf,
    /// Sequence container giving motion, expression and audio.
    #[arg(long)]
    pub driver: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Morphable model container; defaults to `model.hgla` next to the driver.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fail before generating if the checkpoint is not this preset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Recorded in the manifest.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Self-reenact every sequence of `--data` with this checkpoint.
    #[arg(
        long,
        conflicts_with = "fake_data",
        required_unless_present = "fake_data"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Use this dataset's frames as the generated side instead.
    #[arg(long)]
    pub fake_data: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of csim,fid,fvd,aed.
    #[arg(long, default_value = "csim,fid,fvd,aed")]
    pub metrics: String,
    /// Report file; printed to stdout as well.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Objective evaluations per AED fit.
    #[arg(long)]
    pub fit_evaluations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// PNG frame directory, sequence container or `.jsonl` loss log.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid columns.
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Reenact(a) => commands::reenact(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Preview(a) => commands::preview(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
