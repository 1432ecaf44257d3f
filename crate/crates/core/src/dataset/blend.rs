//! Self-blended images: a region of the paired fake image, optionally
//! corrupted, pasted onto the real image.
//!
//! With `M` the keep-real mask (0 inside the region, 1 elsewhere) the blend
//! is `M·real + (1 − M)·source`, where `source` is the fake image after the
//! forgery-type corruption. The stored mask is `1 − M`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ForgeryRegion, ForgeryType, ImageSample, Label};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, Image, Mask};

/// Pixel-index box of a fractional region on an `h × w` image.
fn region_box(region: ForgeryRegion, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (fy0, fy1, fx0, fx1) = region.bounds();
    let y0 = (fy0 * h as f64).round() as usize;
    let y1 = ((fy1 * h as f64).round() as usize).clamp(y0, h);
    let x0 = (fx0 * w as f64).round() as usize;
    let x1 = ((fx1 * w as f64).round() as usize).clamp(x0, w);
    (y0, y1, x0, x1)
}

/// Forged-area mask (`true` inside the region).
pub fn region_mask(region: ForgeryRegion, h: usize, w: usize) -> Mask {
    let (y0, y1, x0, x1) = region_box(region, h, w);
    Mask::from_shape_fn((h, w), |(y, x)| {
        (y0..y1).contains(&y) && (x0..x1).contains(&x)
    })
}

pub fn sample_region(rng: &mut impl Rng) -> ForgeryRegion {
    ForgeryRegion::ALL[rng.random_range(0..ForgeryRegion::ALL.len())]
}

pub fn sample_type(rng: &mut impl Rng) -> ForgeryType {
    ForgeryType::ALL[rng.random_range(0..ForgeryType::ALL.len())]
}

/// Takes `source` where `forged` is set and `real` elsewhere.
pub fn blend_with_mask(real: &Image, source: &Image, forged: &Mask) -> Result<Image> {
    if real.dim() != source.dim() {
        return Err(Error::InvalidPair(format!(
            "image sizes differ: {:?} vs {:?}",
            real.dim(),
            source.dim()
        )));
    }
    let (h, w, _) = real.dim();
    if forged.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}×{w} mask"),
            format!("{:?}", forged.dim()),
        ));
    }
    Ok(Image::from_shape_fn(real.dim(), |(y, x, c)| {
        if forged[[y, x]] {
            source[[y, x, c]]
        } else {
            real[[y, x, c]]
        }
    }))
}

fn color_shift(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| {
        let mag = rng.random_range(0.08..0.15);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Sinusoidal displacement warp with nearest-pixel sampling.
fn warp(img: &Image, rng: &mut impl Rng) -> Image {
    let (h, w, _) = img.dim();
    let amp = (h.max(w) as f64 / 32.0).max(1.0);
    let period = h.max(w) as f64 / rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let k = std::f64::consts::TAU / period;
    Image::from_shape_fn(img.dim(), |(y, x, c)| {
        let dx = amp * (k * y as f64 + phase).sin();
        let dy = amp * (k * x as f64 + phase).cos();
        let sy = (y as f64 + dy).round().clamp(0.0, h as f64 - 1.0) as usize;
        let sx = (x as f64 + dx).round().clamp(0.0, w as f64 - 1.0) as usize;
        img[[sy, sx, c]]
    })
}

/// The fake image after the corruption of `ty`. Deterministic in `seed`.
pub fn corrupt_source(fake: &Image, ty: ForgeryType, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, _) = fake.dim();
    match ty {
        ForgeryType::BlendBoundary => fake.clone(),
        ForgeryType::Blur => gaussian_blur(fake, (h.max(w) as f64 / 64.0).max(1.0)),
        ForgeryType::ColorDifference => {
            let shift = color_shift(&mut rng);
            Image::from_shape_fn(fake.dim(), |(y, x, c)| {
                (fake[[y, x, c]] + shift[c]).clamp(0.0, 1.0)
            })
        }
        ForgeryType::StructureAbnormal => warp(fake, &mut rng),
    }
}

fn check_pair(real: &ImageSample, fake: &ImageSample) -> Result<()> {
    if real.label != Label::Real {
        return Err(Error::InvalidPair(format!(
            "{} is not a real image",
            real.id
        )));
    }
    if fake.source_real_id.as_deref() != Some(real.id.as_str()) {
        return Err(Error::InvalidPair(format!(
            "{} is not paired with {}",
            fake.id, real.id
        )));
    }
    if real.pixels.dim() != fake.pixels.dim() {
        return Err(Error::InvalidPair(format!(
            "image sizes differ: {:?} vs {:?}",
            real.pixels.dim(),
            fake.pixels.dim()
        )));
    }
    Ok(())
}

/// Blend with an explicit forgery type. The blend id is `<real id>_blend`.
pub fn make_blend_with_type(
    real: &ImageSample,
    fake: &ImageSample,
    region: ForgeryRegion,
    ty: ForgeryType,
    rng_seed: u64,
) -> Result<ImageSample> {
    check_pair(real, fake)?;
    let (h, w) = real.size();
    let forged = region_mask(region, h, w);
    let source = corrupt_source(&fake.pixels, ty, rng_seed);
    Ok(ImageSample {
        id: format!("{}_blend", real.id),
        pixels: blend_with_mask(&real.pixels, &source, &forged)?,
        label: Label::Blend,
        mask: Some(forged),
        source_real_id: Some(real.id.clone()),
        forgery_region: Some(region),
        forgery_type: Some(ty),
    })
}

/// Blend whose forgery type is drawn uniformly from `rng_seed`.
pub fn make_blend(
    real: &ImageSample,
    fake: &ImageSample,
    region: ForgeryRegion,
    rng_seed: u64,
) -> Result<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ty = sample_type(&mut rng);
    make_blend_with_type(real, fake, region, ty, rng.random())
}
