mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "port",
    version,
    about = "Span-based temporal grounding with positional recovery training"
)]
#[command(after_long_help = config::key_reference())]
struct Cli {
    /// Seed for every random stream; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Config override as key=value, repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Size {
    Tiny,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset: annotations.jsonl plus one .pft per video.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Length statistics and the (start, duration) heatmap of an annotation file.
    Stats {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = port_core::analysis::DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes logs and checkpoints to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON destination.
        #[arg(long)]
        out: PathBuf,
        /// Which part of the index-ordered dataset to score.
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// Row label in the printed table.
        #[arg(long, default_value = "Port")]
        label: String,
    },
    /// Localize one query in one feature file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        video_features: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        duration_s: f64,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Size::Tiny)]
        size: Size,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Globals {
        seed: cli.seed,
        overrides: cli.overrides,
    };
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&ctx, config.as_deref(), &out),
        Command::Stats {
            annotations,
            bins,
            out,
        } => commands::stats(&annotations, bins, &out),
        Command::Train { config, data, out } => {
            commands::train(&ctx, config.as_deref(), &data, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            train_fraction,
            label,
        } => commands::eval(&checkpoint, &data, &out, split, train_fraction, &label),
        Command::Predict {
            checkpoint,
            video_features,
            query,
            duration_s,
        } => commands::predict(&checkpoint, &video_features, &query, duration_s),
        Command::Gradcheck { size } => commands::gradcheck(&ctx, size),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => exit::report(e),
    }
}
