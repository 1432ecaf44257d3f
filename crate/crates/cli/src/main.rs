//! `mgffd`: build datasets, train the staged model, evaluate, inspect
//! routing, and fuse with an external detector.

mod commands;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mgffd",
    version,
    about = "Toy multi-granularity face-forgery VLM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural real/fake face pairs as `real/` and `fake/` PNGs.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 22)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the question-answer dataset from a directory of image pairs.
    BuildDataset {
        /// Directory with `real/<id>.png` and `fake/<id>.png`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Run one training stage (0 is the LM warm-up).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        stage: u8,
        /// TOML file with paths, preset, model, and stage overrides.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: train::TrainFlags,
    },
    /// Generate answers for a dataset and write a JSON metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 96)]
        max_tokens: usize,
        /// Comma-separated kinds to evaluate (local, common, classify, quality).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
    },
    /// Print the expert routing of every adapted layer for one image.
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train the fusion head on external scores and write fused predictions.
    Fuse {
        /// CSV with header `id,score`.
        #[arg(long)]
        external_scores: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV of per-image predictions.
        #[arg(long)]
        out: PathBuf,
        /// Weight of the external prediction.
        #[arg(long, default_value_t = 0.5)]
        weight: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        /// Where to save the checkpoint with the trained fusion head.
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
    },
}

/// Exit code for a stage run out of order.
const EXIT_STAGE_ORDER: u8 = 2;

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthCorpus {
            out,
            pairs,
            size,
            seed,
        } => commands::synth_corpus(&out, pairs, size, seed),
        Command::BuildDataset {
            input,
            out,
            seed,
            size,
            max_images,
        } => commands::build_dataset(input, out, seed, size, max_images),
        Command::Train {
            stage,
            config,
            overrides,
        } => train::run(stage, &config, &overrides),
        Command::Evaluate {
            checkpoint,
            dataset,
            report,
            max_tokens,
            kinds,
        } => commands::evaluate(&checkpoint, &dataset, &report, max_tokens, kinds),
        Command::InspectRouting { checkpoint, image } => {
            commands::inspect_routing(&checkpoint, &image)
        }
        Command::Fuse {
            external_scores,
            checkpoint,
            dataset,
            out,
            weight,
            steps,
            lr,
            save_checkpoint,
        } => commands::fuse(commands::FuseArgs {
            external_scores,
            checkpoint,
            dataset,
            out,
            weight,
            steps,
            lr,
            save_checkpoint,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let stage_order = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(mgffd_core::Error::StageOrder(_))));
            ExitCode::from(if stage_order { EXIT_STAGE_ORDER } else { 1 })
        }
    }
}
