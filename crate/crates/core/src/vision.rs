//! Toy vision tower: patch transformer encoder, upsampling segmentation
//! decoder, and the binary classification head.
//!
//! Shapes for the default 64×64 input with 8×8 patches: 64 patch tokens of
//! width `dim`, an 8×8 grid upsampled twice to a 32×32 mask.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Var};
use crate::error::{Error, Result};
use crate::nn::{
    add_block, add_conv3x3, add_layer_norm, add_linear, band_pool_matrix, block, conv3x3,
    layer_norm, linear, patchify_index, upsample2,
};
use crate::params::{init, ParamGroup, ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub decoder_channels: [usize; 2],
    /// Number of seg-feature tokens `L`.
    pub seg_tokens: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            decoder_channels: [32, 16],
            seg_tokens: 4,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side of the predicted mask.
    pub fn mask_size(&self) -> usize {
        4 * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if !self.grid().is_multiple_of(2) {
            return Err(Error::Config("patch grid side must be even".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.seg_tokens == 0 || self.seg_tokens > self.mask_size() {
            return Err(Error::Config(format!(
                "seg_tokens must be in 1..={}",
                self.mask_size()
            )));
        }
        Ok(())
    }
}

pub fn add_vision_params(
    store: &mut ParamStore,
    cfg: &VisionConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let enc = ParamGroup::VisionEncoder;
    let patch_in = cfg.patch * cfg.patch * 3;
    add_linear(store, "vision.patch", patch_in, cfg.dim, enc, rng)?;
    store.insert(
        "vision.pos",
        enc,
        init::normal(rng, cfg.num_patches(), cfg.dim, 0.02),
    )?;
    for l in 0..cfg.layers {
        add_block(
            store,
            &format!("vision.block{l}"),
            cfg.dim,
            cfg.mlp_hidden,
            enc,
            rng,
        )?;
    }
    add_layer_norm(store, "vision.ln_f", cfg.dim, enc)?;

    let seg = ParamGroup::SegDecoder;
    let [c1, c2] = cfg.decoder_channels;
    add_conv3x3(store, "seg.conv1", cfg.dim, c1, seg, rng)?;
    add_conv3x3(store, "seg.conv2", c1, c2, seg, rng)?;
    add_linear(store, "seg.mask", c2, 1, seg, rng)?;
    for b in 0..cfg.seg_tokens {
        add_linear(store, &format!("seg.band{b}"), c2, cfg.dim, seg, rng)?;
    }
    add_linear(store, "cls", c2, 1, ParamGroup::ClsHead, rng)
}

/// Encoder output: patch tokens and their mean.
#[derive(Clone, Copy)]
pub struct VisionFeatures<'t> {
    pub patch_embeddings: Var<'t>,
    pub pooled: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct SegOutput<'t> {
    /// `(mask_size²) × 1` logits in raster order.
    pub mask_logits: Var<'t>,
    /// `seg_tokens × dim`.
    pub seg_feature: Var<'t>,
    pub class_logit: Var<'t>,
}

/// Linear patch projection without positions or transformer layers.
pub fn embed_patches<'t>(s: &Session<'t>, cfg: &VisionConfig, pixels: Var<'t>) -> Result<Var<'t>> {
    let n = cfg.image_size * cfg.image_size;
    if pixels.shape() != (n, 3) {
        return Err(Error::shape(
            format!("{n}×3 pixel matrix"),
            format!("{:?}", pixels.shape()),
        ));
    }
    let patch_in = cfg.patch * cfg.patch * 3;
    let patches = pixels.gather(
        cfg.num_patches(),
        patch_in,
        patchify_index(cfg.image_size, cfg.patch, 3),
    );
    linear(s, "vision.patch", patches)
}

/// Encodes an `(size·size) × 3` pixel matrix.
pub fn encode_image<'t>(
    s: &Session<'t>,
    cfg: &VisionConfig,
    pixels: Var<'t>,
) -> Result<VisionFeatures<'t>> {
    let mut x = embed_patches(s, cfg, pixels)? + s.param("vision.pos")?;
    let lin = |name: &str, v: Var<'t>| linear(s, name, v);
    for l in 0..cfg.layers {
        x = block(s, &format!("vision.block{l}"), x, cfg.heads, None, &lin)?;
    }
    let x = layer_norm(s, "vision.ln_f", x)?;
    Ok(VisionFeatures {
        patch_embeddings: x,
        pooled: x.mean_rows(),
    })
}

pub fn decode_segmentation<'t>(
    s: &Session<'t>,
    cfg: &VisionConfig,
    v: &VisionFeatures<'t>,
) -> Result<SegOutput<'t>> {
    let g = cfg.grid();
    let x = upsample2(v.patch_embeddings, g, g);
    let x = conv3x3(s, "seg.conv1", x, 2 * g, 2 * g)?.gelu();
    let x = upsample2(x, 2 * g, 2 * g);
    let feat = conv3x3(s, "seg.conv2", x, 4 * g, 4 * g)?.gelu();
    let mask_logits = linear(s, "seg.mask", feat)?;
    let class_logit = linear(s, "cls", feat.mean_rows())?;
    let side = cfg.mask_size();
    let bands = s
        .tape()
        .constant(band_pool_matrix(side, side, cfg.seg_tokens))
        .matmul(feat);
    let rows: Vec<Var<'t>> = (0..cfg.seg_tokens)
        .map(|b| linear(s, &format!("seg.band{b}"), bands.slice_rows(b, b + 1)))
        .collect::<Result<_>>()?;
    Ok(SegOutput {
        mask_logits,
        seg_feature: s.tape().concat_rows(&rows),
        class_logit,
    })
}

/// Plain values of a vision pass, used to skip frozen towers.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionCache {
    pub patch_embeddings: Arc<Matrix>,
    pub pooled: Arc<Matrix>,
    pub mask_logits: Arc<Matrix>,
    pub seg_feature: Arc<Matrix>,
    pub class_logit: f64,
}

impl VisionCache {
    pub fn from_vars(v: &VisionFeatures<'_>, seg: &SegOutput<'_>) -> Self {
        Self {
            patch_embeddings: v.patch_embeddings.value(),
            pooled: v.pooled.value(),
            mask_logits: seg.mask_logits.value(),
            seg_feature: seg.seg_feature.value(),
            class_logit: seg.class_logit.item(),
        }
    }

    /// Rebinds the cached values as constants on a tape.
    pub fn bind<'t>(&self, s: &Session<'t>) -> (VisionFeatures<'t>, SegOutput<'t>) {
        let t = s.tape();
        (
            VisionFeatures {
                patch_embeddings: t.leaf_shared(Arc::clone(&self.patch_embeddings), false),
                pooled: t.leaf_shared(Arc::clone(&self.pooled), false),
            },
            SegOutput {
                mask_logits: t.leaf_shared(Arc::clone(&self.mask_logits), false),
                seg_feature: t.leaf_shared(Arc::clone(&self.seg_feature), false),
                class_logit: t.scalar(self.class_logit),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> VisionConfig {
        VisionConfig {
            image_size: 16,
            patch: 4,
            dim: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 8,
            decoder_channels: [4, 4],
            seg_tokens: 4,
        }
    }

    fn store(cfg: &VisionConfig, seed: u64) -> ParamStore {
        let mut st = ParamStore::new();
        add_vision_params(&mut st, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        st
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = small();
        let st = store(&cfg, 1);
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let px = tape.constant(Matrix::from_elem((256, 3), 0.3));
        let v = encode_image(&s, &cfg, px).unwrap();
        assert_eq!(v.patch_embeddings.shape(), (16, 8));
        let seg = decode_segmentation(&s, &cfg, &v).unwrap();
        assert_eq!(seg.mask_logits.shape(), (256, 1));
        assert_eq!(seg.seg_feature.shape(), (4, 8));
        let p = crate::autograd::sigmoid(seg.class_logit.item());
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn wrong_size_is_a_shape_error() {
        let cfg = small();
        let st = store(&cfg, 1);
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let px = tape.constant(Matrix::zeros((100, 3)));
        assert!(matches!(
            encode_image(&s, &cfg, px),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_image_with_zero_bias_embeds_to_zero() {
        let cfg = small();
        let st = store(&cfg, 2);
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let e = embed_patches(&s, &cfg, tape.constant(Matrix::zeros((256, 3)))).unwrap();
        assert!(e.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn changing_one_patch_changes_its_row() {
        let cfg = small();
        let st = store(&cfg, 3);
        let tape = Tape::new();
        let s = Session::new(&tape, &st);
        let a = Matrix::from_shape_fn((256, 3), |(i, c)| ((i * 3 + c) % 13) as f64 / 13.0);
        let mut b = a.clone();
        // pixel (5, 9) lies in patch (1, 2), row 6
        b[[5 * 16 + 9, 1]] += 0.5;
        let ea = encode_image(&s, &cfg, tape.constant(a))
            .unwrap()
            .patch_embeddings
            .value();
        let eb = encode_image(&s, &cfg, tape.constant(b))
            .unwrap()
            .patch_embeddings
            .value();
        assert_ne!(ea.row(6), eb.row(6));
    }
}
