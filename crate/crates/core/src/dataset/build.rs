//! Building a dataset directory from paired real/fake images.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::dataset::{
    assemble_qa_set, derive_seed, make_blend, sample_region, write_jsonl, CommonAnnotation,
    DatasetItem, ImageSample, TemplateStore, DATASET_FILE, IMAGE_DIR, MASK_DIR, VOCAB_FILE,
};
use crate::error::{Error, Result};
use crate::imaging::{load_png, quantized, resize, save_mask_png, save_png};
use crate::quality::compute_indicators;
use crate::text::Vocabulary;

/// Optional file in the input directory with human-written answers.
pub const COMMON_FILE: &str = "common.jsonl";

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub input: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub size: usize,
    /// Stop after this many images (real, fake, and blend all count).
    pub max_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildSummary {
    pub images: usize,
    pub records: usize,
    pub dataset: PathBuf,
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_owned());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `real/<id>.png` and `fake/<id>.png`, resized to `size × size`.
pub fn load_pair_dir(input: &Path, size: usize) -> Result<Vec<(ImageSample, ImageSample)>> {
    let (real_dir, fake_dir) = (input.join("real"), input.join("fake"));
    let mut pairs = Vec::new();
    for id in png_stems(&real_dir)? {
        let fake_path = fake_dir.join(format!("{id}.png"));
        if !fake_path.exists() {
            return Err(Error::InvalidPair(format!(
                "no fake image for `{id}` at {}",
                fake_path.display()
            )));
        }
        let real = quantized(&resize(
            &load_png(&real_dir.join(format!("{id}.png")))?,
            size,
        ));
        let fake = quantized(&resize(&load_png(&fake_path)?, size));
        pairs.push((
            ImageSample::real(id.clone(), real),
            ImageSample::fake(format!("{id}_fake"), fake, id),
        ));
    }
    Ok(pairs)
}

/// Writes pairs in the layout [`load_pair_dir`] reads.
pub fn write_pair_dir(dir: &Path, pairs: &[(ImageSample, ImageSample)]) -> Result<()> {
    for sub in ["real", "fake"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (real, fake) in pairs {
        save_png(
            &dir.join("real").join(format!("{}.png", real.id)),
            &real.pixels,
        )?;
        save_png(
            &dir.join("fake").join(format!("{}.png", real.id)),
            &fake.pixels,
        )?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct CommonLine {
    image_id: String,
    question: String,
    answer: String,
}

fn load_common(path: &Path) -> Result<BTreeMap<String, CommonAnnotation>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CommonLine = serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{}:{}", path.display(), i + 1),
            source: e,
        })?;
        out.insert(
            c.image_id,
            CommonAnnotation {
                question: c.question,
                answer: c.answer,
            },
        );
    }
    Ok(out)
}

/// Real, fake, and blend items per identity, cycling over identities until
/// `max_images` items exist or the pairs run out.
pub fn build_items(
    pairs: &[(ImageSample, ImageSample)],
    seed: u64,
    templates: &TemplateStore,
    max_images: Option<usize>,
    common: &BTreeMap<String, CommonAnnotation>,
) -> Result<Vec<DatasetItem>> {
    templates.validate()?;
    let limit = max_images.unwrap_or(usize::MAX);
    let mut items = Vec::new();
    'outer: for (real, fake) in pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &real.id));
        let region = sample_region(&mut rng);
        let blend = make_blend(real, fake, region, rng.random())?;
        for sample in [real, fake, &blend] {
            if items.len() >= limit {
                break 'outer;
            }
            sample.validate()?;
            let quality = compute_indicators(&sample.pixels)?;
            let qas = assemble_qa_set(
                sample,
                &quality,
                templates,
                derive_seed(seed, &sample.id),
                common.get(&sample.id),
            )?;
            items.push(DatasetItem {
                sample: sample.clone(),
                quality,
                qas,
            });
        }
    }
    if items.len() < limit && max_images.is_some() {
        warn!(
            "only {} images available, fewer than the requested {limit}",
            items.len()
        );
    }
    Ok(items)
}

/// Vocabulary closed over every template sentence and every record text.
pub fn dataset_vocabulary(items: &[DatasetItem], templates: &TemplateStore) -> Vocabulary {
    let texts = templates.all_texts().into_iter().chain(
        items
            .iter()
            .flat_map(|it| it.qas.iter())
            .flat_map(|qa| [qa.question.as_str(), qa.answer.as_str()]),
    );
    Vocabulary::build(texts)
}

/// Writes images, masks, the JSONL file, and the vocabulary into
/// `cfg.out`.
pub fn build_dataset(cfg: &BuildConfig) -> Result<BuildSummary> {
    let pairs = load_pair_dir(&cfg.input, cfg.size)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no image pairs under {}",
            cfg.input.display()
        )));
    }
    let common = load_common(&cfg.input.join(COMMON_FILE))?;
    let templates = TemplateStore::default();
    let items = build_items(&pairs, cfg.seed, &templates, cfg.max_images, &common)?;
    write_items(&cfg.out, &items, &templates)
}

/// Saves `items` as a dataset directory.
pub fn write_items(
    out: &Path,
    items: &[DatasetItem],
    templates: &TemplateStore,
) -> Result<BuildSummary> {
    for sub in [IMAGE_DIR, MASK_DIR] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut records = Vec::new();
    for item in items {
        let image = format!("{IMAGE_DIR}/{}.png", item.sample.id);
        save_png(&out.join(&image), &item.sample.pixels)?;
        let mask = match &item.sample.mask {
            Some(m) => {
                let rel = format!("{MASK_DIR}/{}.png", item.sample.id);
                save_mask_png(&out.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        records.extend(item.records(&image, mask.as_deref()));
    }
    let dataset = out.join(DATASET_FILE);
    write_jsonl(&dataset, &records)?;
    dataset_vocabulary(items, templates).save(&out.join(VOCAB_FILE))?;
    info!(
        "wrote {} records for {} images to {}",
        records.len(),
        items.len(),
        dataset.display()
    );
    Ok(BuildSummary {
        images: items.len(),
        records: records.len(),
        dataset,
    })
}
