//! `topa`: runs the text-only pre-alignment pipeline stage by stage.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 partial output,
//! 3 fingerprint mismatch between stage inputs.

mod config;
mod error;
mod report;
mod rundir;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::{CaptionSource, RunConfig};
use crate::error::CliError;
use crate::stages::Ctx;

#[derive(Debug, Parser)]
#[command(name = "topa", version, about = "Text-only pre-alignment pipeline")]
struct Cli {
    /// TOML run config; built-in defaults are used when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` in the config
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Deterministic training and single-threaded evaluation
    #[arg(long, global = true)]
    deterministic: bool,
    /// Directory holding stage runs, overriding `out` in the config
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Reuse the stage directory for this fingerprint instead of writing a new one
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a tideo corpus shard (synthetic, fixture replay or live LLM)
    Generate {
        /// Number of tideos, overriding `generation.count`
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Corpus statistics of the generated shard
    Stats,
    /// Text features of the corpus plus image-feature benchmarks and finetuning data
    Encode,
    /// Build the support memory of caption text features
    BuildMemory {
        /// `corpus` or a file with one caption per line
        #[arg(long, value_name = "SOURCE")]
        captions: Option<String>,
        /// Maximum number of anchors
        #[arg(long, value_name = "N")]
        size: Option<usize>,
        /// Softmax temperature
        #[arg(long, value_name = "TAU")]
        tau: Option<f64>,
    },
    /// Text-only alignment; pretrains and caches the backbone if needed
    Train,
    /// Finetune the aligned checkpoint on image features
    Finetune,
    /// Evaluate a checkpoint on one benchmark
    Eval,
    /// Evaluation grid over modes, frame counts, projection and blind input
    Ablate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    cfg.deterministic |= cli.deterministic;
    match &cli.command {
        Command::Generate { count: Some(n) } => cfg.generation.count = *n,
        Command::BuildMemory { captions, size, tau } => {
            if let Some(c) = captions {
                cfg.memory.captions = if c == "corpus" { CaptionSource::Corpus } else { CaptionSource::File(c.into()) };
            }
            if let Some(n) = size {
                cfg.memory.size = *n;
            }
            if let Some(t) = tau {
                cfg.memory.temperature = *t;
            }
        }
        _ => {}
    }
    let ctx = Ctx::new(cfg, cli.resume);
    match cli.command {
        Command::Generate { .. } => ctx.generate(),
        Command::Stats => ctx.stats(),
        Command::Encode => ctx.encode(),
        Command::BuildMemory { .. } => ctx.build_memory(),
        Command::Train => ctx.train(),
        Command::Finetune => ctx.finetune(),
        Command::Eval => ctx.eval(),
        Command::Ablate => ctx.ablate(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
