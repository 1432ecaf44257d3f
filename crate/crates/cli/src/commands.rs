use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use serde::Serialize;

use mgffd_core::checkpoint::Checkpoint;
use mgffd_core::dataset::{
    build_dataset as build, load_items, synth_pairs, write_pair_dir, BuildConfig, QaKind,
};
use mgffd_core::eval::{
    evaluate as run_eval, fuse_predictions, fused_probability, train_fusion_head, EvalOptions,
    FusionTraining,
};
use mgffd_core::imaging::{load_png, resize};
use mgffd_core::quality::compute_indicators;

pub fn synth_corpus(out: &Path, pairs: usize, size: usize, seed: u64) -> anyhow::Result<()> {
    let pairs = synth_pairs(pairs, size, seed);
    write_pair_dir(out, &pairs)?;
    info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

pub fn build_dataset(
    input: PathBuf,
    out: PathBuf,
    seed: u64,
    size: usize,
    max_images: Option<usize>,
) -> anyhow::Result<()> {
    let summary = build(&BuildConfig {
        input,
        out,
        seed,
        size,
        max_images,
    })?;
    info!(
        "{} images, {} records in {}",
        summary.images,
        summary.records,
        summary.dataset.display()
    );
    Ok(())
}

pub fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    report: &Path,
    max_tokens: usize,
    kinds: Option<Vec<String>>,
) -> anyhow::Result<()> {
    let kinds = kinds
        .map(|ks| {
            ks.iter()
                .map(|k| k.trim().parse::<QaKind>())
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let items = load_items(dataset)?;
    let r = run_eval(&ckpt.model, &items, &EvalOptions { max_tokens, kinds })?;
    let m = &r.metrics;
    info!(
        "{} records: acc {:.4} recall {:.4} precision {:.4} f1 {:.4} bleu4 {:.4} ambiguous {}",
        r.records, m.acc, m.recall, m.precision, m.f1, r.bleu4, r.ambiguous
    );
    fs::write(report, serde_json::to_vec_pretty(&r)?)
        .with_context(|| format!("writing {}", report.display()))?;
    Ok(())
}

pub fn inspect_routing(checkpoint: &Path, image: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = &ckpt.model;
    if model.layout.is_empty() {
        bail!("checkpoint has no adapters; run stage 3 first");
    }
    let pixels = resize(&load_png(image)?, model.config.vision.image_size);
    let quality = compute_indicators(&pixels)?.quality_vector();
    for (layer, r) in model.inspect_routing(&pixels, &quality)? {
        let probs: Vec<String> = r.probabilities.iter().map(|p| format!("{p:.6}")).collect();
        println!(
            "{layer}\tselected={}\tp*={:.6}\tprobs=[{}]",
            r.selected_index,
            r.p_star,
            probs.join(", ")
        );
    }
    Ok(())
}

pub struct FuseArgs {
    pub external_scores: PathBuf,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub save_checkpoint: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
struct ScoreRow {
    id: String,
    score: f64,
}

#[derive(Serialize)]
struct FusedRow<'a> {
    id: &'a str,
    is_fake: bool,
    p_external: f64,
    p_fused: f64,
    p_final: f64,
}

fn read_scores(path: &Path) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ScoreRow = row.with_context(|| format!("reading {}", path.display()))?;
        out.insert(row.id, row.score);
    }
    Ok(out)
}

pub fn fuse(a: FuseArgs) -> anyhow::Result<()> {
    let scores = read_scores(&a.external_scores)?;
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let items = load_items(&a.dataset)?;
    let history = train_fusion_head(
        &mut ckpt.model,
        &items,
        &scores,
        &FusionTraining {
            steps: a.steps,
            lr: a.lr,
        },
    )?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!("fusion loss {first:.4} -> {last:.4}");
    }
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (mut correct, mut total) = (0usize, 0usize);
    for it in &items {
        let Some(&p_external) = scores.get(&it.sample.id) else {
            continue;
        };
        let cache = ckpt.model.vision_cache(&it.sample.pixels)?;
        let p_fused = fused_probability(&ckpt.model, &cache, p_external)?;
        let p_final = fuse_predictions(p_external, p_fused, a.weight)?;
        let is_fake = it.sample.label.is_fake();
        correct += usize::from((p_final >= 0.5) == is_fake);
        total += 1;
        w.serialize(FusedRow {
            id: &it.sample.id,
            is_fake,
            p_external,
            p_fused,
            p_final,
        })?;
    }
    w.flush()?;
    info!(
        "fused accuracy {correct}/{total}; wrote {}",
        a.out.display()
    );
    if let Some(path) = &a.save_checkpoint {
        ckpt.save(path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}
