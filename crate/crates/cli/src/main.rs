mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Adversarial camouflage patches: train, apply, detect and score them.
#[derive(Parser, Debug)]
#[command(name = "camo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset root; relative `--data` paths are taken as given.
#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Dataset directory (images/, labels/, dataset.json).
    #[arg(long, env = "CAMO_DATA")]
    pub data: PathBuf,
    /// Split to read; all splits when omitted.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic overhead-vehicle dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Key-value file overriding synthesis settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cut a dataset into fixed-size windows.
    Tile {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 416)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class counts and box-size statistics as CSV.
    Stats {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the vehicle detector.
    TrainDetector {
        #[command(flatten)]
        data: DataArg,
        /// Detector architecture key-value file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one adversarial patch from an experiment config.
    TrainPatch {
        #[arg(long)]
        config: PathBuf,
        /// Detector weights; falls back to `weights` in the config.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Dataset; falls back to `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: u64,
        /// Reduced epoch budget for smoke runs (bypasses the epoch floor).
        #[arg(long)]
        smoke_epochs: Option<usize>,
        /// Use only the first N images.
        #[arg(long)]
        max_images: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector that finds patches overlaid on the imagery.
    TrainPatchDetector {
        #[command(flatten)]
        data: DataArg,
        /// Directory of trained patches (one subdirectory per patch).
        #[arg(long)]
        patch_dir: PathBuf,
        #[arg(long, default_value = "single_class")]
        label_mode: String,
        /// Patch sizes cycled over the training images.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
        sizes: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a patch to every labeled object and write the patched dataset.
    Apply {
        #[command(flatten)]
        data: DataArg,
        /// Patch PNG.
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        size: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against labels.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Detector weights to run.
        #[arg(long, conflicts_with = "predictions")]
        weights: Option<PathBuf>,
        /// Directory of stored `<stem>.txt` prediction files instead of a detector.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 1000)]
        n_boot: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a patch library for camouflage and patch detectability.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        patch_detector: PathBuf,
        #[arg(long)]
        patch_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_boot: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG charts from a sweep CSV.
    Report {
        #[arg(long)]
        sweep: PathBuf,
        /// Clean-imagery mF1 drawn as the reference line.
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
