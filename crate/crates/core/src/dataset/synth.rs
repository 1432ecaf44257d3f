//! Procedural aligned faces for tests, benches, and the smoke corpus.
//!
//! A fake is the same head re-rendered with a donor's inner features and
//! skin tone, smoothed inside the face oval. Feature placement follows the
//! region boxes so blends cover the intended parts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageSample;
use crate::imaging::{gaussian_blur, quantized, Image};

#[derive(Debug, Clone)]
struct Face {
    background: [f64; 3],
    hair: [f64; 3],
    skin: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: f64,
    iris: [f64; 3],
    nose_len: f64,
    mouth_w: f64,
    mouth_h: f64,
    lips: [f64; 3],
    light: f64,
}

fn rgb(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

impl Face {
    fn random(rng: &mut impl Rng) -> Self {
        let base = rng.random_range(0.45..0.8);
        Self {
            background: rgb(rng, 0.1, 0.9),
            hair: rgb(rng, 0.02, 0.4),
            skin: [base + 0.12, base, base - 0.1],
            face_rx: rng.random_range(0.30..0.36),
            face_ry: rng.random_range(0.38..0.44),
            eye_y: rng.random_range(0.32..0.36),
            eye_dx: rng.random_range(0.13..0.18),
            eye_r: rng.random_range(0.035..0.055),
            iris: rgb(rng, 0.05, 0.45),
            nose_len: rng.random_range(0.10..0.15),
            mouth_w: rng.random_range(0.10..0.16),
            mouth_h: rng.random_range(0.025..0.045),
            lips: [
                rng.random_range(0.55..0.8),
                rng.random_range(0.15..0.3),
                rng.random_range(0.2..0.35),
            ],
            light: rng.random_range(-0.25..0.25),
        }
    }

    fn render(&self, size: usize) -> Image {
        let n = size as f64;
        Image::from_shape_fn((size, size, 3), |(y, x, c)| {
            let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            let (dx, dy) = (u - 0.5, v - 0.52);
            let in_face = (dx / self.face_rx).powi(2) + (dy / self.face_ry).powi(2) <= 1.0;
            let in_hair = (dx / (self.face_rx + 0.05)).powi(2)
                + ((v - 0.45) / (self.face_ry + 0.04)).powi(2)
                <= 1.0
                && v < 0.3;
            let mut px = if in_hair {
                self.hair[c]
            } else if in_face {
                self.skin[c] * (1.0 + self.light * dx)
            } else {
                self.background[c]
            };
            if in_face {
                for side in [-1.0, 1.0] {
                    let (ex, ey) = (0.5 + side * self.eye_dx, self.eye_y);
                    let d =
                        ((u - ex) / (1.6 * self.eye_r)).powi(2) + ((v - ey) / self.eye_r).powi(2);
                    if d <= 1.0 {
                        px = if d <= 0.35 { self.iris[c] } else { 0.95 };
                    }
                }
                let nose_top = 0.44;
                if (nose_top..nose_top + self.nose_len).contains(&v)
                    && (u - 0.5).abs() <= 0.012 + 0.25 * (v - nose_top)
                {
                    px *= 0.8;
                }
                let md = ((u - 0.5) / self.mouth_w).powi(2) + ((v - 0.75) / self.mouth_h).powi(2);
                if md <= 1.0 {
                    px = self.lips[c];
                }
            }
            px.clamp(0.0, 1.0)
        })
    }

    fn face_mask(&self, size: usize) -> Vec<bool> {
        let n = size as f64;
        (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                let (dx, dy) = ((x as f64 + 0.5) / n - 0.5, (y as f64 + 0.5) / n - 0.52);
                (dx / self.face_rx).powi(2) + (dy / self.face_ry).powi(2) <= 1.0
            })
            .collect()
    }
}

/// A real face for identity `seed`.
pub fn synth_face(seed: u64, size: usize) -> Image {
    quantized(&Face::random(&mut ChaCha8Rng::seed_from_u64(seed)).render(size))
}

/// A face-swapped version of `synth_face(seed, size)` with inner features
/// from donor `donor_seed`.
pub fn synth_fake(seed: u64, donor_seed: u64, size: usize) -> Image {
    let head = Face::random(&mut ChaCha8Rng::seed_from_u64(seed));
    let donor = Face::random(&mut ChaCha8Rng::seed_from_u64(donor_seed));
    let swapped = Face {
        skin: std::array::from_fn(|c| 0.5 * (head.skin[c] + donor.skin[c])),
        eye_dx: donor.eye_dx,
        eye_r: donor.eye_r,
        iris: donor.iris,
        nose_len: donor.nose_len,
        mouth_w: donor.mouth_w,
        mouth_h: donor.mouth_h,
        lips: donor.lips,
        ..head.clone()
    };
    let sharp = swapped.render(size);
    let soft = gaussian_blur(&sharp, (size as f64 / 96.0).max(0.6));
    let inside = head.face_mask(size);
    quantized(&Image::from_shape_fn(sharp.dim(), |(y, x, c)| {
        if inside[y * size + x] {
            soft[[y, x, c]]
        } else {
            sharp[[y, x, c]]
        }
    }))
}

/// `n` paired (real, fake) samples with ids `face0000`, `face0000_fake`, ...
pub fn synth_pairs(n: usize, size: usize, seed: u64) -> Vec<(ImageSample, ImageSample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id_seed: u64 = rng.random();
            let donor: u64 = rng.random();
            let id = format!("face{i:04}");
            let real = ImageSample::real(id.clone(), synth_face(id_seed, size));
            let fake =
                ImageSample::fake(format!("{id}_fake"), synth_fake(id_seed, donor, size), id);
            (real, fake)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_deterministic_and_distinct() {
        let a = synth_pairs(3, 32, 9);
        let b = synth_pairs(3, 32, 9);
        assert_eq!(a, b);
        for (real, fake) in &a {
            real.validate().unwrap();
            fake.validate().unwrap();
            assert_ne!(real.pixels, fake.pixels);
            assert_eq!(fake.source_real_id.as_deref(), Some(real.id.as_str()));
        }
    }
}
