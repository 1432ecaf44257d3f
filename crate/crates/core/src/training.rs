//! Loss functions, the per-stage freezing schedule, Adam, and the training
//! loop.
//!
//! Stage 0 is a text-only warm-up of the base LM, standing in for a
//! pretrained language model. Stages 1 to 3 follow the forgery-aware
//! schedule: segmentation and classification, then prompts and projectors,
//! then the adapters.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softplus, Matrix, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{derive_seed, DatasetItem, Label};
use crate::error::{Error, Result};
use crate::imaging::mask_to_targets;
use crate::lm::embed_tokens;
use crate::lora::QUALITY_DIM;
use crate::model::{Model, VisionPass};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::vision::VisionCache;

/// Probability clamp for the binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
const COS_EPS: f64 = 1e-12;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.995);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Text,
    Binary,
    Segmentation,
    FineGrained,
    Calibration,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Text,
        LossKind::Binary,
        LossKind::Segmentation,
        LossKind::FineGrained,
        LossKind::Calibration,
    ];
}

/// Weights of `L_b`, `L_s`, `L_f`, and `L_tcs`; `L_text` has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn weight(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Text => 1.0,
            LossKind::Binary => self.lambda1,
            LossKind::Segmentation => self.lambda2,
            LossKind::FineGrained => self.lambda3,
            LossKind::Calibration => self.lambda4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub text: f64,
    pub binary: f64,
    pub segmentation: f64,
    pub fine_grained: f64,
    pub calibration: f64,
}

impl LossComponents {
    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Text => self.text,
            LossKind::Binary => self.binary,
            LossKind::Segmentation => self.segmentation,
            LossKind::FineGrained => self.fine_grained,
            LossKind::Calibration => self.calibration,
        }
    }

    fn slot(&mut self, kind: LossKind) -> &mut f64 {
        match kind {
            LossKind::Text => &mut self.text,
            LossKind::Binary => &mut self.binary,
            LossKind::Segmentation => &mut self.segmentation,
            LossKind::FineGrained => &mut self.fine_grained,
            LossKind::Calibration => &mut self.calibration,
        }
    }

    /// Zeroes every component outside `active`.
    pub fn masked(&self, active: &BTreeSet<LossKind>) -> Self {
        let mut out = Self::default();
        for k in active {
            *out.slot(*k) = self.get(*k);
        }
        out
    }
}

/// `L_text + λ1 L_b + λ2 L_s + λ3 L_f + λ4 L_tcs`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    LossKind::ALL.iter().map(|k| w.weight(*k) * c.get(*k)).sum()
}

pub fn loss_binary(y_hat: f64, y: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&y_hat) {
        return Err(Error::InvalidArgument(format!(
            "probability {y_hat} outside [0, 1]"
        )));
    }
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(if y { -p.ln() } else { -(1.0 - p).ln() })
}

/// Two-way softmax loss that favors `sim_nh` over `sim_ph`.
pub fn loss_fine_grained(sim_nh: f64, sim_ph: f64) -> f64 {
    softplus(sim_ph - sim_nh)
}

/// Binary cross-entropy of `softmax(logit_real, logit_fake)[fake]`.
pub fn loss_text_calibration(logit_real: f64, logit_fake: f64, is_fake: bool) -> f64 {
    let d = logit_fake - logit_real;
    softplus(d) - if is_fake { d } else { 0.0 }
}

/// Mean token cross-entropy of `logits` (`n × V`) against `targets`; zero
/// for an empty answer.
pub fn loss_text(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    check_targets(logits.dim(), targets)?;
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    Ok(total / targets.len() as f64)
}

/// Mean per-pixel binary cross-entropy of logits against soft targets.
pub fn loss_segmentation(logits: &Matrix, targets: &Matrix) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape(
            format!("{} targets", logits.len()),
            targets.len(),
        ));
    }
    let total: f64 = logits
        .iter()
        .zip(targets.iter())
        .map(|(z, t)| softplus(*z) - t * z)
        .sum();
    Ok(total / logits.len() as f64)
}

fn check_targets(dim: (usize, usize), targets: &[u32]) -> Result<()> {
    if dim.0 != targets.len() {
        return Err(Error::shape(format!("{} logit rows", targets.len()), dim.0));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= dim.1) {
        return Err(Error::InvalidIndex {
            index: t as usize,
            len: dim.1,
        });
    }
    Ok(())
}

/// `L_b` from a `1 × 1` logit: `softplus(z) - y·z`.
pub fn binary_loss_var(logit: Var<'_>, y: bool) -> Var<'_> {
    let sp = logit.softplus();
    if y {
        sp - logit
    } else {
        sp
    }
}

pub fn segmentation_loss_var<'t>(logits: Var<'t>, targets: &Matrix) -> Result<Var<'t>> {
    if logits.value().len() != targets.len() {
        return Err(Error::shape(
            format!("{} targets", logits.value().len()),
            targets.len(),
        ));
    }
    let t = Arc::new(
        targets
            .clone()
            .into_shape_with_order(logits.shape())
            .expect("target shape"),
    );
    Ok((logits.softplus() - logits.mul_const(t)).mean())
}

pub fn text_loss_var<'t>(logits: Var<'t>, targets: &[u32]) -> Result<Var<'t>> {
    if targets.is_empty() {
        return Ok(logits.tape().scalar(0.0));
    }
    check_targets(logits.shape(), targets)?;
    let v = logits.cols();
    let index: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| i * v + t as usize)
        .collect();
    let picked = logits
        .log_softmax_rows()
        .gather(targets.len(), 1, Arc::new(index));
    Ok(picked.mean().scale(-1.0))
}

pub fn calibration_var<'t>(logit_real: Var<'t>, logit_fake: Var<'t>, is_fake: bool) -> Var<'t> {
    let d = logit_fake - logit_real;
    if is_fake {
        (-d).softplus()
    } else {
        d.softplus()
    }
}

/// Cosine similarity of two `1 × n` rows.
pub fn cosine_var<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let dot = (a * b).sum();
    let norms = (a * a).sum() * (b * b).sum();
    let inv = norms.add_scalar(COS_EPS).ln().scale(-0.5).exp();
    dot * inv
}

pub fn fine_grained_var<'t>(sim_nh: Var<'t>, sim_ph: Var<'t>) -> Var<'t> {
    (sim_ph - sim_nh).softplus()
}

/// Pulls `p` toward another real `p2` and `n` toward another fake `n2`,
/// each against the `(p, n)` similarity, in the same two-way form.
pub fn pair_term_var<'t>(p: Var<'t>, n: Var<'t>, p2: Var<'t>, n2: Var<'t>) -> Var<'t> {
    let pn = cosine_var(p, n);
    (pn - cosine_var(p, p2)).softplus() + (pn - cosine_var(n, n2)).softplus()
}

/// Which features `L_f` compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Mean-pooled vision-encoder output.
    Vision,
    /// Mean of the projected image tokens in LM space.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Desk-scale rates and batch sizes that train in minutes.
    Toy,
    /// Published learning rates and batch sizes.
    Published,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// 0 is the LM warm-up; 1 to 3 are the forgery-aware stages.
    pub stage: u8,
    pub trainable: BTreeSet<ParamGroup>,
    pub active_losses: BTreeSet<LossKind>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lambdas: LossWeights,
    pub pair_term: bool,
    pub lf_features: FeatureTap,
    pub max_grad_norm: Option<f64>,
}

/// Optional per-key overrides, as read from a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub trainable: Option<BTreeSet<ParamGroup>>,
    pub active_losses: Option<BTreeSet<LossKind>>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub lambdas: Option<LossWeights>,
    pub pair_term: Option<bool>,
    pub lf_features: Option<FeatureTap>,
    pub max_grad_norm: Option<f64>,
}

pub fn stage_trainable(stage: u8) -> Result<BTreeSet<ParamGroup>> {
    use ParamGroup::*;
    Ok(match stage {
        0 => [LmBase].into(),
        1 => [VisionEncoder, SegDecoder, ClsHead].into(),
        2 => [ImageProjector, Prompt, SegProjector].into(),
        3 => [LoraExpert, Router, Prompt].into(),
        _ => return Err(Error::Config(format!("unknown stage {stage}"))),
    })
}

pub fn stage_losses(stage: u8) -> Result<BTreeSet<LossKind>> {
    use LossKind::*;
    Ok(match stage {
        0 => [Text].into(),
        1 => [Binary, Segmentation].into(),
        2 => [Text, Binary, Segmentation, FineGrained].into(),
        3 => LossKind::ALL.into(),
        _ => return Err(Error::Config(format!("unknown stage {stage}"))),
    })
}

impl StageConfig {
    pub fn preset(stage: u8, preset: Preset) -> Result<Self> {
        let (lr, batch_size, steps) = match (preset, stage) {
            (Preset::Published, 3) => (1e-6, 48, 1000),
            (Preset::Published, _) => (4e-5, 64, 1000),
            (Preset::Toy, 0) => (3e-3, 6, 600),
            (Preset::Toy, 1) => (2e-3, 12, 1500),
            (Preset::Toy, 2) => (2e-3, 6, 600),
            (Preset::Toy, _) => (1e-3, 6, 900),
        };
        Ok(Self {
            stage,
            trainable: stage_trainable(stage)?,
            active_losses: stage_losses(stage)?,
            lr,
            batch_size,
            steps,
            seed: 0,
            lambdas: LossWeights::default(),
            pair_term: true,
            lf_features: FeatureTap::Projected,
            max_grad_norm: Some(1.0),
        })
    }

    pub fn published(stage: u8) -> Result<Self> {
        Self::preset(stage, Preset::Published)
    }

    pub fn toy(stage: u8) -> Result<Self> {
        Self::preset(stage, Preset::Toy)
    }

    pub fn with_overrides(mut self, o: &StageOverrides) -> Self {
        if let Some(v) = &o.trainable {
            self.trainable = v.clone();
        }
        if let Some(v) = &o.active_losses {
            self.active_losses = v.clone();
        }
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { self.$f = v; })* };
        }
        take!(lr, batch_size, steps, seed, lambdas, pair_term, lf_features);
        if o.max_grad_norm.is_some() {
            self.max_grad_norm = o.max_grad_norm;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        stage_trainable(self.stage)?;
        self.lambdas.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {g}"
                )));
            }
        }
        Ok(())
    }

    fn uses_lm(&self) -> bool {
        self.active_losses.contains(&LossKind::Text)
            || self.active_losses.contains(&LossKind::Calibration)
    }

    fn vision_frozen(&self) -> bool {
        use ParamGroup::*;
        ![VisionEncoder, SegDecoder, ClsHead]
            .iter()
            .any(|g| self.trainable.contains(g))
    }
}

/// Stage `n ≥ 2` needs a checkpoint that completed stage `n - 1`; the
/// warm-up must precede stage 1.
pub fn check_stage_order(checkpoint_stage: u8, stage: u8) -> Result<()> {
    match stage {
        0 if checkpoint_stage > 0 => Err(Error::StageOrder(format!(
            "LM warm-up must precede stage 1, checkpoint is at stage {checkpoint_stage}"
        ))),
        2 | 3 if checkpoint_stage + 1 < stage => Err(Error::StageOrder(format!(
            "stage {stage} needs a stage-{} checkpoint, got stage {checkpoint_stage}",
            stage - 1
        ))),
        _ => Ok(()),
    }
}

/// Adam with bias correction over named parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates exactly the parameters named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.dim()));
            m.zip_mut_with(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            let w = store.value_mut(name)?;
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, m, v| {
                *w -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// Per-step loss values; inactive components are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub text: f64,
    pub binary: f64,
    pub segmentation: f64,
    pub fine_grained: f64,
    pub calibration: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainWarnings {
    /// Triplet roles filled from another identity.
    pub fallback_pairings: usize,
    /// Answers lacking an authenticity word while `L_tcs` is active.
    pub missing_authenticity: usize,
    /// Fake images without a ground-truth mask while `L_s` is active.
    pub missing_masks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub history: Vec<StepLosses>,
    pub warnings: TrainWarnings,
}

impl TrainReport {
    /// Mean total loss over the first and last `window` steps.
    pub fn start_end_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[StepLosses]| s.iter().map(|h| h.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.history[..w]), mean(&self.history[n - w..])))
    }
}

fn role(label: Label) -> usize {
    match label {
        Label::Real => 0,
        Label::Fake => 1,
        Label::Blend => 2,
    }
}

/// Identity shared by a real image and everything derived from it.
pub fn identity_of(item: &DatasetItem) -> &str {
    match (&item.sample.label, &item.sample.source_real_id) {
        (Label::Real, _) | (_, None) => &item.sample.id,
        (_, Some(src)) => src,
    }
}

/// Seed-deterministic batches of `(P, N, H)` triplets grouped by identity.
struct Sampler {
    rng: ChaCha8Rng,
    identities: Vec<[Option<usize>; 3]>,
    pools: [Vec<usize>; 3],
    order: Vec<usize>,
    cursor: usize,
}

struct Batch {
    images: Vec<usize>,
    /// Positions in `images` of `(P, N, H)`.
    triplets: Vec<[usize; 3]>,
}

impl Sampler {
    fn new(items: &[DatasetItem], seed: u64) -> Self {
        let mut by_id: BTreeMap<&str, [Option<usize>; 3]> = BTreeMap::new();
        let mut pools: [Vec<usize>; 3] = Default::default();
        for (i, it) in items.iter().enumerate() {
            let r = role(it.sample.label);
            pools[r].push(i);
            by_id.entry(identity_of(it)).or_default()[r].get_or_insert(i);
        }
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            identities: by_id.into_values().collect(),
            pools,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn triplets_possible(&self) -> bool {
        self.pools.iter().all(|p| !p.is_empty())
    }

    fn next_identity(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.identities.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn next(&mut self, batch_size: usize, n_items: usize, warnings: &mut TrainWarnings) -> Batch {
        if !self.triplets_possible() {
            let images = (0..batch_size)
                .map(|_| self.rng.random_range(0..n_items))
                .collect();
            return Batch {
                images,
                triplets: Vec::new(),
            };
        }
        let k = (batch_size / 3).max(1);
        let mut images = Vec::with_capacity(3 * k);
        let mut triplets = Vec::with_capacity(k);
        for _ in 0..k {
            let id = self.next_identity();
            let mut t = [0; 3];
            for (r, slot) in t.iter_mut().enumerate() {
                let idx = match self.identities[id][r] {
                    Some(i) => i,
                    None => {
                        warnings.fallback_pairings += 1;
                        *self.pools[r].choose(&mut self.rng).expect("nonempty pool")
                    }
                };
                *slot = images.len();
                images.push(idx);
            }
            triplets.push(t);
        }
        Batch { images, triplets }
    }
}

/// Per-item constants reused across steps.
struct Prepared {
    targets: Option<Matrix>,
    quality: [f64; QUALITY_DIM],
    is_fake: bool,
    cache: Option<VisionCache>,
}

fn prepare(model: &Model, items: &[DatasetItem], cache: bool) -> Result<Vec<Prepared>> {
    let side = model.config.vision.mask_size();
    items
        .iter()
        .map(|it| {
            let is_fake = it.sample.label.is_fake();
            let targets = match &it.sample.mask {
                Some(m) => Some(mask_to_targets(m, side)),
                None if !is_fake => Some(Matrix::zeros((side, side))),
                None => None,
            };
            Ok(Prepared {
                targets,
                quality: it.quality.quality_vector(),
                is_fake,
                cache: if cache {
                    Some(model.vision_cache(&it.sample.pixels)?)
                } else {
                    None
                },
            })
        })
        .collect()
}

fn adapters_nonzero(store: &ParamStore) -> bool {
    store.iter().any(|(k, p)| {
        k.starts_with("lora.") && k.ends_with(".b") && p.value.iter().any(|v| *v != 0.0)
    })
}

/// Text-only input: question embeddings at their usual position with zero
/// rows standing in for the prompt and vision segments.
fn warmup_prefix<'t>(s: &Session<'t>, model: &Model, question: &str) -> Result<Var<'t>> {
    let c = &model.config;
    let lead = 2 * (c.prompt_m + crate::prompt::FAKE_SUFFIX.split_whitespace().count())
        + c.vision.seg_tokens;
    let q = embed_tokens(s, &c.lm, &model.vocab.encode(question))?;
    let t = s.tape();
    Ok(t.concat_rows(&[
        t.constant(Matrix::zeros((lead, c.lm.dim))),
        q,
        t.constant(Matrix::zeros((c.vision_tokens(), c.lm.dim))),
    ]))
}

/// One step's weighted objective plus its component values.
struct StepGraph<'t> {
    total: Option<Var<'t>>,
    components: LossComponents,
}

struct StepContext<'a> {
    model: &'a Model,
    items: &'a [DatasetItem],
    prepared: &'a [Prepared],
    cfg: &'a StageConfig,
    use_adapters: bool,
}

impl StepContext<'_> {
    fn graph<'t>(
        &self,
        s: &Session<'t>,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        warnings: &mut TrainWarnings,
    ) -> Result<StepGraph<'t>> {
        let cfg = self.cfg;
        let model = self.model;
        let active = |k| cfg.active_losses.contains(&k);
        let mut sums: BTreeMap<LossKind, Vec<Var<'t>>> = BTreeMap::new();
        let mut feats: Vec<Option<Var<'t>>> = Vec::with_capacity(batch.images.len());

        for &idx in &batch.images {
            let item = &self.items[idx];
            let prep = &self.prepared[idx];
            let qa = &item.qas[rng.random_range(0..item.qas.len())];
            if cfg.stage == 0 {
                let prefix = warmup_prefix(s, model, &qa.question)?;
                let answer = model.answer_ids(&qa.answer);
                let logits = model.answer_logits(s, prefix, &[], &answer)?;
                sums.entry(LossKind::Text)
                    .or_default()
                    .push(text_loss_var(logits, &answer)?);
                feats.push(None);
                continue;
            }
            let v: VisionPass<'t> = match &prep.cache {
                Some(c) => model.bind_cache(s, c),
                None => model.vision(s, &item.sample.pixels)?,
            };
            if active(LossKind::Binary) {
                let l = binary_loss_var(v.seg.class_logit, prep.is_fake);
                sums.entry(LossKind::Binary).or_default().push(l);
            }
            if active(LossKind::Segmentation) {
                match &prep.targets {
                    Some(t) => {
                        let l = segmentation_loss_var(v.seg.mask_logits, t)?;
                        sums.entry(LossKind::Segmentation).or_default().push(l);
                    }
                    None => warnings.missing_masks += 1,
                }
            }
            if cfg.uses_lm() {
                let routes: Vec<_> = if self.use_adapters {
                    model
                        .routes(s, v.features.pooled, &prep.quality)?
                        .into_iter()
                        .map(|r| r.0)
                        .collect()
                } else {
                    Vec::new()
                };
                let prefix = model.prefix(s, &v, &qa.question)?;
                let answer = model.answer_ids(&qa.answer);
                let logits = model.answer_logits(s, prefix.sequence, &routes, &answer)?;
                if active(LossKind::Text) {
                    sums.entry(LossKind::Text)
                        .or_default()
                        .push(text_loss_var(logits, &answer)?);
                }
                if active(LossKind::Calibration) {
                    match qa.authenticity_word_index {
                        Some(i) => {
                            let (lr, lf) = crate::lm::authenticity_logits(logits, i, &model.vocab)?;
                            let l = calibration_var(lr, lf, qa.is_fake_label);
                            sums.entry(LossKind::Calibration).or_default().push(l);
                        }
                        None => warnings.missing_authenticity += 1,
                    }
                }
            }
            feats.push(if active(LossKind::FineGrained) {
                Some(match cfg.lf_features {
                    FeatureTap::Vision => v.features.pooled,
                    FeatureTap::Projected => model
                        .project_image(s, v.features.patch_embeddings)?
                        .mean_rows(),
                })
            } else {
                None
            });
        }

        if active(LossKind::FineGrained) && !batch.triplets.is_empty() {
            let f = |i: usize| feats[i].expect("feature for L_f");
            let k = batch.triplets.len();
            for (j, &[p, n, h]) in batch.triplets.iter().enumerate() {
                let mut l = fine_grained_var(cosine_var(f(n), f(h)), cosine_var(f(p), f(h)));
                if cfg.pair_term && k > 1 {
                    let [p2, n2, _] = batch.triplets[(j + 1) % k];
                    l = l + pair_term_var(f(p), f(n), f(p2), f(n2));
                }
                sums.entry(LossKind::FineGrained).or_default().push(l);
            }
        }

        let tape = s.tape();
        let mut components = LossComponents::default();
        let mut total: Option<Var<'t>> = None;
        for (kind, terms) in sums {
            let mean = tape.concat_rows(&terms).mean();
            *components.slot(kind) = mean.item();
            let weighted = mean.scale(cfg.lambdas.weight(kind));
            total = Some(match total {
                Some(t) => t + weighted,
                None => weighted,
            });
        }
        Ok(StepGraph { total, components })
    }
}

/// Trains `ckpt.model` for `cfg.steps` steps. Only parameters whose group is
/// in `cfg.trainable` change.
pub fn run_stage(
    ckpt: &mut Checkpoint,
    items: &[DatasetItem],
    cfg: &StageConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_stage_order(ckpt.stage, cfg.stage)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(it) = items.iter().find(|it| it.qas.is_empty()) {
        return Err(Error::IncompleteSample {
            id: it.sample.id.clone(),
            reason: "no question-answer records".into(),
        });
    }
    let cache = cfg.stage > 0 && cfg.vision_frozen();
    let prepared = prepare(&ckpt.model, items, cache)?;
    let use_adapters = cfg.trainable.contains(&ParamGroup::LoraExpert)
        || cfg.trainable.contains(&ParamGroup::Router)
        || adapters_nonzero(&ckpt.model.store);
    let mut sampler = Sampler::new(items, derive_seed(cfg.seed, "batches"));
    if cfg.active_losses.contains(&LossKind::FineGrained) && !sampler.triplets_possible() {
        warn!("no complete real/fake/blend roles in the data; L_f is skipped");
    }
    let mut qa_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "questions"));
    let mut adam = Adam::new(cfg.lr);
    let mut warnings = TrainWarnings::default();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sampler.next(cfg.batch_size, items.len(), &mut warnings);
        let (components, grads) = {
            let ctx = StepContext {
                model: &ckpt.model,
                items,
                prepared: &prepared,
                cfg,
                use_adapters,
            };
            let tape = Tape::new();
            let s = Session::new(&tape, &ckpt.model.store)
                .with_trainable(cfg.trainable.iter().copied())
                .training(derive_seed(cfg.seed, &format!("dropout{step}")));
            let g = ctx.graph(&s, &batch, &mut qa_rng, &mut warnings)?;
            let grads = match g.total {
                Some(t) if t.requires_grad() => s.param_gradients(&tape.backward(t)),
                _ => BTreeMap::new(),
            };
            (g.components, grads)
        };
        let mut grads = grads;
        if let Some(max) = cfg.max_grad_norm {
            clip_global_norm(&mut grads, max);
        }
        adam.step(&mut ckpt.model.store, &grads)?;
        let c = components.masked(&cfg.active_losses);
        let total = total_loss(&c, &cfg.lambdas);
        if !total.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite loss at stage {} step {step}",
                cfg.stage
            )));
        }
        if step % 20 == 0 || step + 1 == cfg.steps {
            info!("stage {} step {step}: loss {total:.4}", cfg.stage);
        }
        history.push(StepLosses {
            step,
            total,
            text: c.text,
            binary: c.binary,
            segmentation: c.segmentation,
            fine_grained: c.fine_grained,
            calibration: c.calibration,
        });
    }
    if warnings.fallback_pairings > 0 {
        warn!(
            "{} triplet roles were filled from other identities",
            warnings.fallback_pairings
        );
    }
    if warnings.missing_authenticity > 0 {
        warn!(
            "{} answers had no authenticity word for L_tcs",
            warnings.missing_authenticity
        );
    }
    ckpt.stage = ckpt.stage.max(cfg.stage);
    Ok(TrainReport {
        stage: cfg.stage,
        history,
        warnings,
    })
}

/// `σ(logit_fake - logit_real)`, the two-way fake probability.
pub fn pair_fake_probability(logit_real: f64, logit_fake: f64) -> f64 {
    sigmoid(logit_fake - logit_real)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn binary_loss_examples() {
        assert!((loss_binary(0.5, true).unwrap() - LN_2).abs() < 1e-12);
        assert!(loss_binary(1.0, true).unwrap() < 1e-6);
        assert!((loss_binary(0.9, false).unwrap() - 10f64.ln()).abs() < 1e-9);
        assert!((loss_binary(0.0, true).unwrap() + PROB_EPS.ln()).abs() < 1e-9);
        assert!(loss_binary(1.5, true).is_err());
    }

    #[test]
    fn binary_var_matches_scalar() {
        let tape = Tape::new();
        for z in [-3.0, -0.2, 0.0, 1.7] {
            for y in [false, true] {
                let l = binary_loss_var(tape.scalar(z), y).item();
                assert!((l - loss_binary(sigmoid(z), y).unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fine_grained_examples() {
        assert!((loss_fine_grained(0.3, 0.3) - LN_2).abs() < 1e-12);
        assert!((loss_fine_grained(0.8, 0.2) - (1.0 + (-0.6f64).exp()).ln()).abs() < 1e-12);
        assert!(loss_fine_grained(50.0, 0.0) < 1e-20);
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let l = loss_fine_grained(-1.0 + 0.1 * i as f64, 0.1);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn calibration_examples() {
        assert!((loss_text_calibration(0.0, 0.0, true) - LN_2).abs() < 1e-12);
        assert!(loss_text_calibration(0.0, 40.0, true) < 1e-15);
        let expected = -sigmoid(-1.0).ln();
        assert!((loss_text_calibration(1.0, 0.0, true) - expected).abs() < 1e-12);
        assert!((expected - 1.3133).abs() < 1e-4);
        let tape = Tape::new();
        let v = calibration_var(tape.scalar(1.0), tape.scalar(0.0), true).item();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn text_loss_examples() {
        let v = 7;
        let uniform = Matrix::zeros((3, v));
        assert!((loss_text(&uniform, &[0, 3, 6]).unwrap() - (v as f64).ln()).abs() < 1e-12);
        assert_eq!(
            loss_text(&uniform.slice(ndarray::s![0..0, ..]).to_owned(), &[]).unwrap(),
            0.0
        );
        let mut onehot = Matrix::from_elem((2, v), -60.0);
        onehot[[0, 2]] = 60.0;
        onehot[[1, 5]] = 60.0;
        assert!(loss_text(&onehot, &[2, 5]).unwrap() < 1e-30);
        assert!(loss_text(&uniform, &[0, 9, 1]).is_err());
    }

    #[test]
    fn segmentation_loss_examples() {
        let zeros = Matrix::zeros((16, 1));
        let t = Matrix::from_shape_fn((4, 4), |(y, x)| ((x + y) % 2) as f64);
        assert!((loss_segmentation(&zeros, &t).unwrap() - LN_2).abs() < 1e-12);
        let perfect = Matrix::from_shape_fn((16, 1), |(i, _)| {
            if t.iter().nth(i).unwrap() > &0.5 {
                40.0
            } else {
                -40.0
            }
        });
        assert!(loss_segmentation(&perfect, &t).unwrap() < 1e-15);
        let tape = Tape::new();
        let v = segmentation_loss_var(tape.constant(perfect.clone()), &t)
            .unwrap()
            .item();
        assert!((v - loss_segmentation(&perfect, &t).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents {
            text: 1.0,
            binary: 2.0,
            segmentation: 3.0,
            fine_grained: 4.0,
            calibration: 5.0,
        };
        assert_eq!(total_loss(&c, &LossWeights::default()), 15.0);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        };
        assert_eq!(total_loss(&c, &zero), 1.0);
        let s1 = c.masked(&stage_losses(1).unwrap());
        assert_eq!(total_loss(&s1, &LossWeights::default()), 5.0);
    }

    #[test]
    fn stage_schedule() {
        use ParamGroup::*;
        assert!(stage_trainable(1).unwrap().contains(&SegDecoder));
        assert!(!stage_trainable(1).unwrap().contains(&LmBase));
        assert!(!stage_trainable(2).unwrap().contains(&LmBase));
        assert!(stage_trainable(3).unwrap().contains(&LoraExpert));
        assert!(!stage_trainable(3).unwrap().contains(&LmBase));
        assert!(stage_trainable(4).is_err());
        let p = StageConfig::published(3).unwrap();
        assert_eq!((p.lr, p.batch_size), (1e-6, 48));
        let p = StageConfig::published(1).unwrap();
        assert_eq!((p.lr, p.batch_size), (4e-5, 64));
    }

    #[test]
    fn stage_order_rules() {
        assert!(check_stage_order(0, 1).is_ok());
        assert!(matches!(check_stage_order(0, 2), Err(Error::StageOrder(_))));
        assert!(check_stage_order(1, 2).is_ok());
        assert!(matches!(check_stage_order(1, 3), Err(Error::StageOrder(_))));
        assert!(check_stage_order(3, 3).is_ok());
        assert!(matches!(check_stage_order(2, 0), Err(Error::StageOrder(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store
            .insert("w", ParamGroup::Prompt, Matrix::zeros((1, 2)))
            .unwrap();
        let mut adam = Adam::new(0.01);
        let grads: BTreeMap<_, _> = [("w".to_string(), ndarray::array![[2.0, -0.5]])].into();
        adam.step(&mut store, &grads).unwrap();
        let w = store.value("w").unwrap();
        assert!((w[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((w[[0, 1]] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g: BTreeMap<_, _> = [("a".to_string(), ndarray::array![[3.0, 4.0]])].into();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][[0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn overrides_replace_only_given_keys() {
        let base = StageConfig::toy(2).unwrap();
        let o = StageOverrides {
            lr: Some(0.5),
            steps: Some(3),
            ..Default::default()
        };
        let c = base.clone().with_overrides(&o);
        assert_eq!((c.lr, c.steps, c.batch_size), (0.5, 3, base.batch_size));
    }
}
