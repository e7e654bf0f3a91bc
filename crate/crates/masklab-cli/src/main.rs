//! Experiment driver for the masked-diffusion laboratory.
//!
//! Subcommands: `train` (objective-interpolation harness), `decode`
//! (strategy-by-block-length corpus grid), `metrics` (corpus metric table),
//! `verify` (theorem sweep and inequality chain), `ingest` (corpus import).
//!
//! Configuration comes from a single JSON file plus flag overrides; the
//! only environment variable honored is `MASKLAB_OUTPUT_DIR`. Exit codes:
//! 0 success, 1 runtime error, 2 configuration error, 3 verification
//! failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Verification(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Verification(m) => write!(f, "verification failure: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<masklab::Error> for CliError {
    fn from(e: masklab::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "masklab",
    version,
    about = "Desk-scale laboratory for masked-diffusion text generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides config and MASKLAB_OUTPUT_DIR).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Restrict the decode grid to one strategy.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Restrict the decode grid to one block length.
    #[arg(long, global = true)]
    block_length: Option<usize>,

    /// Denoising steps per block (default: equal to the block length).
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Confidence threshold for dynamic low-confidence remasking.
    #[arg(long, global = true)]
    tau: Option<f64>,

    /// Redraw kept tokens after selection (bias elimination).
    #[arg(long, global = true)]
    bias_elim: bool,

    /// Decode seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Self-test mutation: keep the lowest-confidence proposals, which the
    /// verify sweep must flag as violations.
    #[arg(long, global = true)]
    corrupt: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per objective code and emit checkpoints and curves.
    Train,
    /// Generate corpora over the strategy-by-block-length grid.
    Decode,
    /// Compute the metric table over previously decoded corpora.
    Metrics,
    /// Run the theorem sweep and the entropy inequality chain.
    Verify,
    /// Import a corpus file into the canonical JSON-lines form.
    Ingest {
        /// Input file.
        #[arg(long)]
        input: PathBuf,
        /// `token-ids` (JSON-lines) or `text` (whitespace tokenized).
        #[arg(long, default_value = "token-ids")]
        mode: String,
    },
}

fn resolve(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &common.strategy {
        config.decode.strategies = vec![s.clone()];
    }
    if let Some(b) = common.block_length {
        config.decode.block_lengths = vec![b];
    }
    if common.steps.is_some() {
        config.decode.steps = common.steps;
    }
    if let Some(tau) = common.tau {
        config.decode.tau = tau;
    }
    if common.bias_elim {
        config.decode.bias_elim = true;
    }
    if let Some(seed) = common.seed {
        config.decode.seed = seed;
    }
    if common.corrupt {
        config.verify.corrupt = true;
    }
    // The effective output dir stays out of the echoed config so reports
    // from identical configs are byte-identical regardless of destination.
    let output_dir = common
        .output_dir
        .clone()
        .or_else(|| std::env::var_os("MASKLAB_OUTPUT_DIR").map(PathBuf::from))
        .or_else(|| config.output_dir.take())
        .unwrap_or_else(|| PathBuf::from("masklab-out"));
    Ok((config, output_dir))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (config, out) = resolve(&cli.common)?;
    match cli.command {
        Command::Train => commands::train::run(&config, &out),
        Command::Decode => commands::decode::run(&config, &out),
        Command::Metrics => commands::metrics::run(&config, &out),
        Command::Verify => commands::verify::run(&config, &out),
        Command::Ingest { input, mode } => commands::ingest::run(&config, &out, &input, &mode),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
