//! Face quality indicators: sharpness, illumination, integrity, and their
//! three-level buckets.
//!
//! The sharpness score is an edge-width proxy, not CPBD: there is no
//! psychometric just-noticeable-blur table. It compares the gradient energy
//! of the luminance plane before and after a reference Gaussian blur of
//! width `REFERENCE_SIGMA`:
//!
//! `score = 1 - E(blur(I)) / E(I)`, with `E` the sum of squared forward
//! differences.
//!
//! For an ideal step edge of width `s` this is `1 - s / sqrt(s^2 + r^2)`,
//! so wide edges score low and a hard step scores near 1. The blur uses
//! symmetric borders, under which blur and forward differences share the
//! cosine basis; further blurring shifts gradient energy toward frequencies
//! the reference blur keeps, so the score cannot rise under Gaussian blur
//! beyond rounding.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur_plane, luminance, Image};

/// Width of the reference blur in pixels.
pub const REFERENCE_SIGMA: f64 = 2.0;
/// Gradient energy per pixel below which a plane counts as flat.
const FLAT_ENERGY: f64 = 1e-20;
pub const LOW_THRESHOLD: f64 = 0.3;
pub const HIGH_THRESHOLD: f64 = 0.7;
/// Fractional face box `(y0, y1, x0, x1)` on an aligned face.
pub const FACE_BOX: (f64, f64, f64, f64) = (0.1, 0.9, 0.15, 0.85);
const GRID_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityAttribute {
    Overall,
    Integrity,
    Intensity,
    Uniformity,
    Clarity,
    Visibility,
}

impl QualityAttribute {
    /// Canonical order of the quality vector and of quality answers.
    pub const ORDER: [QualityAttribute; 6] = [
        QualityAttribute::Overall,
        QualityAttribute::Integrity,
        QualityAttribute::Intensity,
        QualityAttribute::Uniformity,
        QualityAttribute::Clarity,
        QualityAttribute::Visibility,
    ];
}

impl fmt::Display for QualityAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QualityAttribute::Overall => "overall",
            QualityAttribute::Integrity => "integrity",
            QualityAttribute::Intensity => "intensity",
            QualityAttribute::Uniformity => "uniformity",
            QualityAttribute::Clarity => "clarity",
            QualityAttribute::Visibility => "visibility",
        };
        f.write_str(s)
    }
}

pub fn bucketize(score: f64) -> Result<Level> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::InvalidArgument(format!(
            "quality score {score} outside [0, 1]"
        )));
    }
    Ok(if score < LOW_THRESHOLD {
        Level::Low
    } else if score < HIGH_THRESHOLD {
        Level::Mid
    } else {
        Level::High
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityIndicators {
    pub overall: f64,
    pub integrity: f64,
    pub intensity: f64,
    pub uniformity: f64,
    pub clarity: f64,
    pub visibility: f64,
    pub levels: BTreeMap<QualityAttribute, Level>,
}

impl QualityIndicators {
    /// Builds indicators from the five measured scores; `overall` is their
    /// mean.
    pub fn from_scores(
        integrity: f64,
        intensity: f64,
        uniformity: f64,
        clarity: f64,
        visibility: f64,
    ) -> Result<Self> {
        let overall = (integrity + intensity + uniformity + clarity + visibility) / 5.0;
        Self::with_all(
            overall, integrity, intensity, uniformity, clarity, visibility,
        )
    }

    /// Builds indicators from all six scores, bucketing each.
    pub fn with_all(
        overall: f64,
        integrity: f64,
        intensity: f64,
        uniformity: f64,
        clarity: f64,
        visibility: f64,
    ) -> Result<Self> {
        let mut q = Self {
            overall,
            integrity,
            intensity,
            uniformity,
            clarity,
            visibility,
            levels: BTreeMap::new(),
        };
        for attr in QualityAttribute::ORDER {
            q.levels.insert(attr, bucketize(q.score(attr))?);
        }
        Ok(q)
    }

    pub fn score(&self, attr: QualityAttribute) -> f64 {
        match attr {
            QualityAttribute::Overall => self.overall,
            QualityAttribute::Integrity => self.integrity,
            QualityAttribute::Intensity => self.intensity,
            QualityAttribute::Uniformity => self.uniformity,
            QualityAttribute::Clarity => self.clarity,
            QualityAttribute::Visibility => self.visibility,
        }
    }

    pub fn level(&self, attr: QualityAttribute) -> Result<Level> {
        self.levels
            .get(&attr)
            .copied()
            .ok_or_else(|| Error::IncompleteIndicators(attr.to_string()))
    }

    /// `[overall, integrity, intensity, uniformity, clarity, visibility]`
    pub fn quality_vector(&self) -> [f64; 6] {
        QualityAttribute::ORDER.map(|a| self.score(a))
    }
}

fn box_bounds(h: usize, w: usize, frac: (f64, f64, f64, f64)) -> (usize, usize, usize, usize) {
    let y0 = (frac.0 * h as f64).floor() as usize;
    let y1 = ((frac.1 * h as f64).ceil() as usize).clamp(y0 + 1, h);
    let x0 = (frac.2 * w as f64).floor() as usize;
    let x1 = ((frac.3 * w as f64).ceil() as usize).clamp(x0 + 1, w);
    (y0, y1, x0, x1)
}

fn face_box(lum: &Array2<f64>) -> Array2<f64> {
    let (h, w) = lum.dim();
    let (y0, y1, x0, x1) = box_bounds(h, w, FACE_BOX);
    lum.slice(s![y0..y1, x0..x1]).to_owned()
}

fn gradient_energy(p: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let mut e = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                e += (p[[y, x + 1]] - p[[y, x]]).powi(2);
            }
            if y + 1 < h {
                e += (p[[y + 1, x]] - p[[y, x]]).powi(2);
            }
        }
    }
    e
}

/// Edge-width sharpness proxy of a luminance plane, in `[0, 1]`.
pub fn sharpness_of_plane(lum: &Array2<f64>) -> f64 {
    let e0 = gradient_energy(lum);
    if e0 <= FLAT_ENERGY * lum.len() as f64 {
        return 0.0;
    }
    let e1 = gradient_energy(&gaussian_blur_plane(lum, REFERENCE_SIGMA));
    (1.0 - e1 / e0).clamp(0.0, 1.0)
}

pub fn sharpness_score(pixels: &Image) -> f64 {
    sharpness_of_plane(&luminance(pixels))
}

/// Mean luminance and 4×4-cell luminance uniformity.
pub fn illumination_scores(pixels: &Image) -> (f64, f64) {
    let lum = luminance(pixels);
    let (h, w) = lum.dim();
    let intensity = lum.mean().unwrap_or(0.0).clamp(0.0, 1.0);
    let cells = GRID_CELLS.min(h).min(w).max(1);
    let mut means = Vec::with_capacity(cells * cells);
    for cy in 0..cells {
        for cx in 0..cells {
            let (y0, y1) = (cy * h / cells, (cy + 1) * h / cells);
            let (x0, x1) = (cx * w / cells, (cx + 1) * w / cells);
            means.push(lum.slice(s![y0..y1, x0..x1]).mean().unwrap_or(0.0));
        }
    }
    let mu = means.iter().sum::<f64>() / means.len() as f64;
    let std = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / means.len() as f64).sqrt();
    // 0.5 is the largest possible standard deviation of values in [0, 1]
    let uniformity = (1.0 - std / 0.5).clamp(0.0, 1.0);
    (intensity, uniformity)
}

/// Fraction of face-box pixels whose luminance is not clipped.
pub fn integrity_score(pixels: &Image) -> f64 {
    let fb = face_box(&luminance(pixels));
    let ok = fb.iter().filter(|&&v| (0.05..=0.95).contains(&v)).count();
    ok as f64 / fb.len() as f64
}

pub fn visibility_score(pixels: &Image) -> f64 {
    sharpness_of_plane(&face_box(&luminance(pixels)))
}

pub fn compute_indicators(pixels: &Image) -> Result<QualityIndicators> {
    let (intensity, uniformity) = illumination_scores(pixels);
    QualityIndicators::from_scores(
        integrity_score(pixels),
        intensity,
        uniformity,
        sharpness_score(pixels),
        visibility_score(pixels),
    )
}
