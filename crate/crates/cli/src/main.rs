//! `vefusion` command line: corpus generation, training, the experiment
//! matrix, attention analysis, and report re-rendering.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input,
//! 4 incompatible inputs, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vefusion_core::CoreError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "VEFUSION_OUT";

#[derive(Parser)]
#[command(
    name = "vefusion",
    about = "Desk-scale multi-vision-encoder fusion transformer laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a key=value config file.
    Generate {
        /// Experiment config (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to $VEFUSION_OUT/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model (one encoder combination, one seed).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory produced by `generate`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Encoder combination, e.g. `region,grid` (defaults to config).
        #[arg(long)]
        ves: Option<String>,
        /// Training seed (defaults to the first config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate every encoder combination over every seed.
    TrainMatrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict the encoder universe, e.g. `region,grid`.
        #[arg(long)]
        ves: Option<String>,
        /// Override the seed list, e.g. `1,2,3`.
        #[arg(long)]
        seeds: Option<String>,
        /// Skip cells whose manifest matches the current config.
        #[arg(long)]
        resume: bool,
    },
    /// Capture attention on an evaluation sample and emit the full report
    /// bundle (CSV + SVG + summary JSON).
    Analyze {
        /// Checkpoint base path (without .json/.bin extension).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation sample size.
        #[arg(long, default_value_t = 512)]
        sample: usize,
        /// Chart layer: `last` or `all` (head-averaged over layers).
        #[arg(long, default_value = "last")]
        layer: String,
        /// Also evaluate with one encoder dropped: `first` or `second`.
        #[arg(long)]
        drop_ve: Option<String>,
        /// Dump raw attention for the first N examples.
        #[arg(long, default_value_t = 0)]
        dump_attention: usize,
    },
    /// Re-render the SVG charts of an existing analysis directory from its
    /// summary JSON (charts are views over the CSV/JSON data).
    Report {
        /// Directory containing summary.json from `analyze`.
        #[arg(long)]
        analysis: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) | CoreError::Dimension { .. } => 2,
        CoreError::MissingInput(_) => 3,
        CoreError::Incompatible(_) => 4,
        CoreError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out } => commands::generate(&config, out),
        Command::Train { config, corpus, out, ves, seed } => {
            commands::train(&config, &corpus, out, ves.as_deref(), seed)
        }
        Command::TrainMatrix { config, corpus, out, ves, seeds, resume } => {
            commands::train_matrix(&config, &corpus, out, ves.as_deref(), seeds.as_deref(), resume)
        }
        Command::Analyze {
            checkpoint,
            corpus,
            out,
            sample,
            layer,
            drop_ve,
            dump_attention,
        } => commands::analyze(
            &checkpoint,
            &corpus,
            out,
            sample,
            &layer,
            drop_ve.as_deref(),
            dump_attention,
        ),
        Command::Report { analysis, out } => commands::report(&analysis, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
