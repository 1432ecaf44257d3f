//! The full toy VLM: vision tower, prompts, image projector, adapted LM,
//! and the fusion head, over one [`ParamStore`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{to_matrix, Image};
use crate::lm::{self, add_lm_params, block_linears, embed_tokens, forward_logits, LmConfig};
use crate::lora::{
    apply_hybrid, route, wrap_linear, ExpertRouting, LoraConfig, LoraLayout, Routed, QUALITY_DIM,
};
use crate::nn::{add_linear, avg_pool2_matrix, linear};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::prompt::{
    add_prompt_params, location_prompt, probability_prompt, prompt_halves, AssembledInput,
    PromptBundle,
};
use crate::text::Vocabulary;
use crate::vision::{
    add_vision_params, decode_segmentation, encode_image, SegOutput, VisionCache, VisionConfig,
    VisionFeatures,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    /// Context vectors per authenticity half, `M`.
    pub prompt_m: usize,
    pub fusion_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            prompt_m: 8,
            fusion_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()?;
        self.lora.validate()?;
        if self.prompt_m == 0 {
            return Err(Error::Config("prompt_m must be positive".into()));
        }
        Ok(())
    }

    /// A miniature configuration (16×16 images, width 8) for tests and
    /// quick experiments.
    pub fn tiny() -> Self {
        Self {
            vision: VisionConfig {
                image_size: 16,
                patch: 4,
                dim: 8,
                layers: 1,
                heads: 2,
                mlp_hidden: 8,
                decoder_channels: [4, 4],
                seg_tokens: 4,
            },
            lm: LmConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                context: 200,
                mlp_hidden: 8,
                vocab_size: 0,
            },
            lora: LoraConfig::default(),
            prompt_m: 2,
            fusion_hidden: 4,
        }
    }

    /// Rows of the projected vision segment.
    pub fn vision_tokens(&self) -> usize {
        let half = self.vision.grid() / 2;
        half * half
    }
}

/// Vision-side outputs for one image, live on a tape.
#[derive(Clone, Copy)]
pub struct VisionPass<'t> {
    pub features: VisionFeatures<'t>,
    pub seg: SegOutput<'t>,
}

impl<'t> VisionPass<'t> {
    /// Forgery probability `ŷ = σ(class_logit)`.
    pub fn y_hat(&self) -> Var<'t> {
        self.seg.class_logit.sigmoid()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub layout: LoraLayout,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Quality vector as a `1 × 6` row.
pub fn quality_row(q: &[f64; QUALITY_DIM]) -> Matrix {
    Matrix::from_shape_vec((1, QUALITY_DIM), q.to_vec()).expect("quality row")
}

impl Model {
    /// Fresh model with adapters already wrapped around the target layers.
    /// Each component draws from its own generator stream.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.lm.vocab_size = vocab.len();
        config.validate()?;
        let mut store = ParamStore::new();
        add_vision_params(&mut store, &config.vision, &mut stream_rng(seed, 1))?;
        add_lm_params(&mut store, &config.lm, &mut stream_rng(seed, 2))?;
        let mut rng = stream_rng(seed, 3);
        add_prompt_params(
            &mut store,
            config.prompt_m,
            config.vision.seg_tokens,
            config.vision.dim,
            config.lm.dim,
            &mut rng,
        )?;
        add_linear(
            &mut store,
            "proj.fc1",
            config.vision.dim,
            config.lm.dim,
            ParamGroup::ImageProjector,
            &mut rng,
        )?;
        add_linear(
            &mut store,
            "proj.fc2",
            config.lm.dim,
            config.lm.dim,
            ParamGroup::ImageProjector,
            &mut rng,
        )?;
        let fusion = ParamGroup::FusionHead;
        add_linear(
            &mut store,
            "fusion.fc1",
            config.vision.dim + 1,
            config.fusion_hidden,
            fusion,
            &mut rng,
        )?;
        add_linear(
            &mut store,
            "fusion.fc2",
            config.fusion_hidden,
            1,
            fusion,
            &mut rng,
        )?;
        let mut model = Self {
            config,
            vocab,
            store,
            layout: LoraLayout::default(),
        };
        model.wrap_adapters(seed)?;
        Ok(model)
    }

    /// Base linear layers named by `lora.target_layers`, in wrap order.
    pub fn adapter_targets(&self) -> Vec<String> {
        let targets = &self.config.lora.target_layers;
        let mut out: Vec<String> = (0..self.config.lm.layers)
            .flat_map(block_linears)
            .filter(|name| targets.iter().any(|t| name.ends_with(&format!(".{t}"))))
            .collect();
        if targets.iter().any(|t| t == "head") {
            out.push("lm.head".into());
        }
        out
    }

    /// Wraps every target layer; fails if any adapter already exists.
    pub fn wrap_adapters(&mut self, seed: u64) -> Result<()> {
        if !self.layout.is_empty() {
            return Err(Error::Config("model adapters are already wrapped".into()));
        }
        let targets = self.adapter_targets();
        let known = targets
            .iter()
            .filter(|t| self.store.contains(&format!("{t}.w")))
            .count();
        if known != targets.len()
            || targets.is_empty() && !self.config.lora.target_layers.is_empty()
        {
            return Err(Error::Config(format!(
                "unknown lora target in {:?}",
                self.config.lora.target_layers
            )));
        }
        let mut rng = stream_rng(seed, 4);
        for t in targets {
            wrap_linear(
                &mut self.store,
                &mut self.layout,
                &t,
                &self.config.lora,
                self.config.vision.dim,
                &mut rng,
            )?;
        }
        Ok(())
    }

    pub fn unwrap_adapters(&mut self) -> usize {
        crate::lora::unwrap_all(&mut self.store, &mut self.layout)
    }

    /// Full vision pass on a `size × size` image.
    pub fn vision<'t>(&self, s: &Session<'t>, pixels: &Image) -> Result<VisionPass<'t>> {
        let (h, w, _) = pixels.dim();
        let size = self.config.vision.image_size;
        if (h, w) != (size, size) {
            return Err(Error::shape(
                format!("{size}×{size} image"),
                format!("{h}×{w}"),
            ));
        }
        let px = s.tape().constant(to_matrix(pixels));
        self.vision_from(s, px)
    }

    /// Vision pass on an already-bound `(size·size) × 3` pixel matrix.
    pub fn vision_from<'t>(&self, s: &Session<'t>, px: Var<'t>) -> Result<VisionPass<'t>> {
        let features = encode_image(s, &self.config.vision, px)?;
        let seg = decode_segmentation(s, &self.config.vision, &features)?;
        Ok(VisionPass { features, seg })
    }

    /// Values of an evaluation-mode vision pass.
    pub fn vision_cache(&self, pixels: &Image) -> Result<VisionCache> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let v = self.vision(&s, pixels)?;
        Ok(VisionCache::from_vars(&v.features, &v.seg))
    }

    pub fn bind_cache<'t>(&self, s: &Session<'t>, cache: &VisionCache) -> VisionPass<'t> {
        let (features, seg) = cache.bind(s);
        VisionPass { features, seg }
    }

    /// 2×2-pooled patch tokens through the two-layer projector.
    pub fn project_image<'t>(&self, s: &Session<'t>, patches: Var<'t>) -> Result<Var<'t>> {
        let pool = s
            .tape()
            .leaf_shared(Arc::new(avg_pool2_matrix(self.config.vision.grid())), false);
        let pooled = pool.matmul(patches);
        let h = linear(s, "proj.fc1", pooled)?.gelu();
        linear(s, "proj.fc2", h)
    }

    /// `[probability ; location ; question ; vision]`.
    pub fn prefix<'t>(
        &self,
        s: &Session<'t>,
        v: &VisionPass<'t>,
        question: &str,
    ) -> Result<AssembledInput<'t>> {
        let (p_fake, p_real) = prompt_halves(s, &self.config.lm, &self.vocab)?;
        let q_ids = self.vocab.encode(question);
        PromptBundle {
            probability: Some(probability_prompt(v.y_hat(), p_fake, p_real)?),
            location: Some(location_prompt(s, v.seg.seg_feature)?),
            question: Some(embed_tokens(s, &self.config.lm, &q_ids)?),
            vision: Some(self.project_image(s, v.features.patch_embeddings)?),
        }
        .assemble()
    }

    /// Routing of every wrapped layer for one image.
    pub fn routes<'t>(
        &self,
        s: &Session<'t>,
        pooled: Var<'t>,
        quality: &[f64; QUALITY_DIM],
    ) -> Result<Vec<(Routed<'t>, ExpertRouting)>> {
        let q = s.tape().constant(quality_row(quality));
        (0..self.layout.len())
            .map(|i| route(s, i, pooled, q))
            .collect()
    }

    /// Linear map for LM sites, through adapters where wrapped and routed.
    pub fn lm_linear<'a, 't>(
        &'a self,
        s: &'a Session<'t>,
        routes: &'a [Routed<'t>],
    ) -> impl Fn(&str, Var<'t>) -> Result<Var<'t>> + 'a {
        move |name, x| match self.layout.index_of(name) {
            Some(i) if i < routes.len() => {
                apply_hybrid(s, &self.config.lora, i, name, x, routes[i])
            }
            _ => linear(s, name, x),
        }
    }

    pub fn answer_logits<'t>(
        &self,
        s: &Session<'t>,
        prefix: Var<'t>,
        routes: &[Routed<'t>],
        answer: &[u32],
    ) -> Result<Var<'t>> {
        let lin = self.lm_linear(s, routes);
        let pad = vec![false; prefix.rows()];
        forward_logits(s, &self.config.lm, &self.vocab, prefix, &pad, answer, &lin)
    }

    /// Answer ids for `text` followed by `<eos>`.
    pub fn answer_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(text);
        ids.push(self.vocab.eos_id());
        ids
    }

    /// Greedy answer to `question` about an image.
    pub fn generate(
        &self,
        cache: &VisionCache,
        quality: &[f64; QUALITY_DIM],
        question: &str,
        max_tokens: usize,
    ) -> Result<String> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let v = self.bind_cache(&s, cache);
        let input = self.prefix(&s, &v, question)?;
        let routes: Vec<Routed<'_>> = self
            .routes(&s, v.features.pooled, quality)?
            .into_iter()
            .map(|r| r.0)
            .collect();
        let lin = self.lm_linear(&s, &routes);
        let pad = vec![false; input.sequence.rows()];
        let ids = lm::generate(
            &s,
            &self.config.lm,
            &self.vocab,
            input.sequence,
            &pad,
            max_tokens,
            &lin,
        )?;
        Ok(self.vocab.decode(&ids))
    }

    /// Routing decision of every wrapped layer, keyed by base layer name.
    pub fn inspect_routing(
        &self,
        pixels: &Image,
        quality: &[f64; QUALITY_DIM],
    ) -> Result<Vec<(String, ExpertRouting)>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let v = self.vision(&s, pixels)?;
        let routes = self.routes(&s, v.features.pooled, quality)?;
        Ok(self
            .layout
            .layers
            .iter()
            .cloned()
            .zip(routes.into_iter().map(|r| r.1))
            .collect())
    }

    /// Fusion-head logit from the pooled feature and an external score,
    /// both `1 × ·` rows.
    pub fn fusion_logit<'t>(
        &self,
        s: &Session<'t>,
        pooled: Var<'t>,
        p_external: Var<'t>,
    ) -> Result<Var<'t>> {
        let x = s.tape().concat_cols(&[pooled, p_external]);
        let h = linear(s, "fusion.fc1", x)?.gelu();
        linear(s, "fusion.fc2", h)
    }

    pub fn fusion_probability<'t>(
        &self,
        s: &Session<'t>,
        pooled: Var<'t>,
        p_external: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(self.fusion_logit(s, pooled, p_external)?.sigmoid())
    }
}
