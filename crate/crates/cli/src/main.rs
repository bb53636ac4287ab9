//! points2pix: generate camera-like images from lidar point clouds.
//!
//! Every command writes a `manifest.json` into its output directory.
//! Exit codes: 0 success, 1 validation, 2 runtime, 3 partial results.

mod config;
mod data;
mod eval;
mod exit;
mod infer;
mod manifest;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use points2pix::geometry::Axis;

use crate::config::TrainFlags;

#[derive(Parser, Debug)]
#[command(name = "points2pix", version, about = "Point-cloud to image translation with a conditional GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a KITTI-layout directory of random synthetic scenes.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
    },
    /// Crop object samples out of a KITTI-layout dataset into a sample cache.
    Preprocess(data::PreprocessArgs),
    /// Train a generator and discriminator on a sample cache.
    Train {
        cache_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Record elapsed seconds in the training log (breaks byte-identical logs).
        #[arg(long)]
        log_wallclock: bool,
    },
    /// Train all three variants and tabulate them.
    Ablate {
        cache_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Generate fakes for cached samples from a checkpoint.
    Generate(infer::GenerateArgs),
    /// Compare generations before and after rotating c2.
    Rotate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "y")]
        axis: Axis,
        #[arg(long, default_value_t = 20.0)]
        degrees: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the color-blob detector over a directory of PNG images.
    Detect {
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fake detections against real ones.
    Evaluate(eval::EvaluateArgs),
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POINTS2PIX_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| exit::invalid(format!("POINTS2PIX_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth {
            out_dir,
            scenes,
            seed,
            width,
            height,
        } => data::synth(&out_dir, scenes, seed, width, height),
        Command::Preprocess(args) => data::preprocess(&args),
        Command::Train {
            cache_dir,
            out,
            flags,
            resume,
            log_wallclock,
        } => train::train(&cache_dir, &out, &flags, resume, log_wallclock),
        Command::Ablate { cache_dir, out, flags } => train::ablate(&cache_dir, &out, &flags),
        Command::Generate(args) => infer::generate(&args),
        Command::Rotate {
            checkpoint,
            cache,
            id,
            axis,
            degrees,
            out,
        } => infer::rotate(&checkpoint, &cache, &id, axis, degrees, &out),
        Command::Detect { images, out } => eval::detect(&images, &out),
        Command::Evaluate(args) => eval::evaluate(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::VALIDATION } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(p) = e.downcast_ref::<exit::Partial>() {
                for f in &p.files {
                    eprintln!("  kept {}", f.display());
                }
            }
            ExitCode::from(exit::code(&e))
        }
    }
}
