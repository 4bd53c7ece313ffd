//! `pdanet` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "pdanet",
    about = "Train, evaluate, and inspect the attention-based emotion regression model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images + manifest) on disk.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long = "image-size", default_value_t = 64)]
        image_size: usize,
    },
    /// Train a model; writes checkpoint, loss history, and a test report.
    Train {
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides applied on top of the file.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint against a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per penalty coefficient and report the best.
    LambdaSearch {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Corrupt the named check's analytic gradient (verifies that
        /// failures are detected and reported).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Export the learned spatial attention map for one input.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PPM/PGM image or a .pdaf feature map.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Nearest-neighbor heatmap upsampling factor.
        #[arg(long, default_value_t = 1)]
        upsample: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth {
            out,
            count,
            seed,
            image_size,
        } => commands::cmd_synth(out, *count, *seed, *image_size),
        Command::Train { config, overrides } => {
            commands::cmd_train(config.as_deref(), overrides)
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => commands::cmd_eval(checkpoint, manifest, out.as_deref()),
        Command::LambdaSearch { config, overrides } => {
            commands::cmd_lambda_search(config.as_deref(), overrides)
        }
        Command::Gradcheck { seed, inject_fault } => {
            commands::cmd_gradcheck(*seed, inject_fault.as_deref())
        }
        Command::ExportAttention {
            checkpoint,
            input,
            out,
            upsample,
        } => commands::cmd_export_attention(checkpoint, input, out, *upsample),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
