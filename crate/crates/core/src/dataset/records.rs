//! Line-oriented dataset file: one JSON object per QA record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ForgeryRegion, ForgeryType, ImageSample, Label, QAPair, QaKind};
use crate::error::{Error, Result};
use crate::imaging::{load_mask_png, load_png};
use crate::quality::{compute_indicators, QualityIndicators};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";

/// One JSONL line. Paths are relative to the dataset file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image: String,
    pub label: Label,
    #[serde(default)]
    pub source_real_id: Option<String>,
    pub kind: QaKind,
    pub question: String,
    pub answer: String,
    pub is_fake_label: bool,
    #[serde(default)]
    pub authenticity_word_index: Option<usize>,
    #[serde(default)]
    pub region: Option<ForgeryRegion>,
    #[serde(default, rename = "type")]
    pub forgery_type: Option<ForgeryType>,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub quality: Option<QualityIndicators>,
}

impl DatasetRecord {
    pub fn qa(&self) -> QAPair {
        QAPair {
            image_id: self.image_id.clone(),
            kind: self.kind,
            question: self.question.clone(),
            answer: self.answer.clone(),
            authenticity_word_index: self.authenticity_word_index,
            is_fake_label: self.is_fake_label,
        }
    }
}

/// An image with its quality indicators and every QA record about it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub sample: ImageSample,
    pub quality: QualityIndicators,
    pub qas: Vec<QAPair>,
}

impl DatasetItem {
    pub fn records(&self, image: &str, mask: Option<&str>) -> Vec<DatasetRecord> {
        self.qas
            .iter()
            .map(|qa| DatasetRecord {
                image_id: self.sample.id.clone(),
                image: image.to_owned(),
                label: self.sample.label,
                source_real_id: self.sample.source_real_id.clone(),
                kind: qa.kind,
                question: qa.question.clone(),
                answer: qa.answer.clone(),
                is_fake_label: qa.is_fake_label,
                authenticity_word_index: qa.authenticity_word_index,
                region: self.sample.forgery_region,
                forgery_type: self.sample.forgery_type,
                mask: mask.map(str::to_owned),
                quality: Some(self.quality.clone()),
            })
            .collect()
    }
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads every non-blank line; errors name the line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{}:{}", path.display(), i + 1),
            source: e,
        })?);
    }
    Ok(out)
}

/// Loads a dataset file into per-image items in first-appearance order.
/// Missing quality indicators are recomputed from the pixels.
pub fn load_items(path: &Path) -> Result<Vec<DatasetItem>> {
    let records = read_jsonl(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<DatasetRecord>> = BTreeMap::new();
    for r in records {
        if !grouped.contains_key(&r.image_id) {
            order.push(r.image_id.clone());
        }
        grouped.entry(r.image_id.clone()).or_default().push(r);
    }
    let mut items = Vec::with_capacity(order.len());
    for id in order {
        let recs = &grouped[&id];
        let first = &recs[0];
        let pixels = load_png(&root.join(&first.image))?;
        let mask = match &first.mask {
            Some(m) => Some(load_mask_png(&root.join(m))?),
            None => None,
        };
        let sample = ImageSample {
            id: id.clone(),
            pixels,
            label: first.label,
            mask,
            source_real_id: first.source_real_id.clone(),
            forgery_region: first.region,
            forgery_type: first.forgery_type,
        };
        sample.validate()?;
        let quality = match &first.quality {
            Some(q) => q.clone(),
            None => compute_indicators(&sample.pixels)?,
        };
        items.push(DatasetItem {
            sample,
            quality,
            qas: recs.iter().map(DatasetRecord::qa).collect(),
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize) -> DatasetRecord {
        DatasetRecord {
            image_id: format!("id{i}"),
            image: format!("images/id{i}.png"),
            label: if i.is_multiple_of(2) {
                Label::Real
            } else {
                Label::Blend
            },
            source_real_id: (i % 2 == 1).then(|| format!("id{}", i - 1)),
            kind: QaKind::ALL[i % 4],
            question: "Is this image real or fake?".into(),
            answer: format!("answer {i}"),
            is_fake_label: i % 2 == 1,
            authenticity_word_index: i.is_multiple_of(3).then_some(i),
            region: (i % 2 == 1).then_some(ForgeryRegion::ALL[i % 4]),
            forgery_type: (i % 2 == 1).then_some(ForgeryType::ALL[i % 4]),
            mask: (i % 2 == 1).then(|| format!("masks/id{i}.png")),
            quality: Some(
                QualityIndicators::from_scores(0.1 * (i % 10) as f64, 0.3, 1.0 / 3.0, 0.7, 0.05)
                    .unwrap(),
            ),
        }
    }

    #[test]
    fn ten_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs: Vec<_> = (0..10).map(record).collect();
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
    }

    #[test]
    fn empty_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &[]).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"");
        assert!(read_jsonl(&p).unwrap().is_empty());
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"image_id\": 3}\n").unwrap();
        let err = read_jsonl(&p).unwrap_err().to_string();
        assert!(err.contains("d.jsonl:1"), "{err}");
    }
}
