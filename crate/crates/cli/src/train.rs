//! `train` subcommand: TOML run configuration plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use log::{info, warn};
use serde::Deserialize;

use mgffd_core::checkpoint::Checkpoint;
use mgffd_core::dataset::{load_items, VOCAB_FILE};
use mgffd_core::model::{Model, ModelConfig};
use mgffd_core::text::Vocabulary;
use mgffd_core::training::{run_stage, Preset, StageConfig, StageOverrides, StepLosses};

/// Flags that take precedence over the config file.
#[derive(clap::Args, Debug, Default)]
pub struct TrainFlags {
    /// Dataset JSONL.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint from the previous stage.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Where to write the new checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    /// Must equal `--stage` when present.
    stage: Option<u8>,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    /// Per-step loss CSV.
    loss_log: Option<PathBuf>,
    #[serde(default = "default_preset")]
    preset: Preset,
    /// Initialization seed for a model built from scratch.
    #[serde(default)]
    model_seed: u64,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    training: StageOverrides,
}

fn default_preset() -> Preset {
    Preset::Toy
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

pub fn run(stage: u8, config: &Path, flags: &TrainFlags) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let file: TrainFile =
        toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    if let Some(s) = file.stage {
        ensure!(s == stage, "config is for stage {s} but --stage is {stage}");
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let pick = |flag: &Option<PathBuf>, from_file: &Option<PathBuf>| {
        flag.clone()
            .or_else(|| from_file.clone().map(|p| resolve(base, p)))
    };
    let dataset = pick(&flags.dataset, &file.dataset).context("no dataset given")?;
    let out = pick(&flags.out, &file.out).context("no output checkpoint given")?;
    let checkpoint = pick(&flags.checkpoint, &file.checkpoint);
    let loss_log = file.loss_log.clone().map(|p| resolve(base, p));

    let mut overrides = file.training.clone();
    if flags.steps.is_some() {
        overrides.steps = flags.steps;
    }
    if flags.seed.is_some() {
        overrides.seed = flags.seed;
    }
    let cfg = StageConfig::preset(stage, file.preset)?.with_overrides(&overrides);

    let items = load_items(&dataset)?;
    let mut ckpt = match &checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => {
            if stage >= 2 {
                warn!("stage {stage} without a checkpoint starts from an untrained model");
            }
            let vocab_path = dataset.with_file_name(VOCAB_FILE);
            let vocab = Vocabulary::load(&vocab_path)?;
            Checkpoint {
                stage: 0,
                model: Model::new(file.model.clone(), vocab, file.model_seed)?,
            }
        }
    };
    let size = ckpt.model.config.vision.image_size;
    if let Some(it) = items.iter().find(|it| it.sample.size() != (size, size)) {
        bail!(
            "image `{}` is {:?} but the model expects {size}×{size}",
            it.sample.id,
            it.sample.size()
        );
    }

    info!(
        "stage {stage}: {} images, {} steps, batch {}, lr {}",
        items.len(),
        cfg.steps,
        cfg.batch_size,
        cfg.lr
    );
    let report = run_stage(&mut ckpt, &items, &cfg)?;
    if let Some((start, end)) = report.start_end_means(10) {
        info!("loss {start:.4} -> {end:.4} (10-step means)");
    }
    let w = report.warnings;
    if w.fallback_pairings + w.missing_authenticity + w.missing_masks > 0 {
        warn!("{w:?}");
    }
    ckpt.save(&out)?;
    info!("wrote {}", out.display());
    if let Some(path) = loss_log {
        write_loss_log(&path, &report.history)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn write_loss_log(path: &Path, history: &[StepLosses]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
