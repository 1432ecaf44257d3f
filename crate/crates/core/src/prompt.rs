//! Probability prompt, location prompt, and assembly of the LM input.
//!
//! The probability prompt is `[ŷ·P_fake ; (1 − ŷ)·P_real]`, where
//! `P_fake = [ctx_fake ; emb("it is fake")]` and likewise for real. The
//! suffix embeddings come from the frozen LM table, so only the context
//! rows learn.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lm::{embed_tokens, LmConfig};
use crate::nn::{add_linear, linear};
use crate::params::{init, ParamGroup, ParamStore, Session};
use crate::text::Vocabulary;

pub const FAKE_SUFFIX: &str = "it is fake";
pub const REAL_SUFFIX: &str = "it is real";

pub fn add_prompt_params(
    store: &mut ParamStore,
    m: usize,
    l: usize,
    seg_dim: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let g = ParamGroup::Prompt;
    store.insert("prompt.ctx_fake", g, init::normal(rng, m, dim, 0.1))?;
    store.insert("prompt.ctx_real", g, init::normal(rng, m, dim, 0.1))?;
    store.insert("prompt.ctx_loc", g, init::normal(rng, l, dim, 0.1))?;
    add_linear(
        store,
        "segproj",
        seg_dim,
        dim,
        ParamGroup::SegProjector,
        rng,
    )
}

/// `[ctx_fake ; emb(it is fake)]` and `[ctx_real ; emb(it is real)]`.
pub fn prompt_halves<'t>(
    s: &Session<'t>,
    lm: &LmConfig,
    vocab: &Vocabulary,
) -> Result<(Var<'t>, Var<'t>)> {
    let t = s.tape();
    let fake = t.concat_rows(&[
        s.param("prompt.ctx_fake")?,
        embed_tokens(s, lm, &vocab.encode(FAKE_SUFFIX))?,
    ]);
    let real = t.concat_rows(&[
        s.param("prompt.ctx_real")?,
        embed_tokens(s, lm, &vocab.encode(REAL_SUFFIX))?,
    ]);
    Ok((fake, real))
}

/// `[ŷ·P_fake ; (1 − ŷ)·P_real]` for a `1 × 1` probability `y_hat`.
pub fn probability_prompt<'t>(y_hat: Var<'t>, p_fake: Var<'t>, p_real: Var<'t>) -> Result<Var<'t>> {
    let y = y_hat.item();
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::InvalidArgument(format!(
            "forgery probability {y} outside [0, 1]"
        )));
    }
    if p_fake.cols() != p_real.cols() {
        return Err(Error::shape(
            format!("width {}", p_fake.cols()),
            p_real.cols(),
        ));
    }
    Ok(y_hat.tape().concat_rows(&[
        p_fake.scale_by(y_hat),
        p_real.scale_by(y_hat.rsub_scalar(1.0)),
    ]))
}

/// `proj(seg_feature) + ctx_loc`.
pub fn location_prompt<'t>(s: &Session<'t>, seg_feature: Var<'t>) -> Result<Var<'t>> {
    let ctx = s.param("prompt.ctx_loc")?;
    let w = s.param("segproj.w")?;
    if seg_feature.cols() != w.rows() || seg_feature.rows() != ctx.rows() {
        return Err(Error::shape(
            format!("{}×{}", ctx.rows(), w.rows()),
            format!("{:?}", seg_feature.shape()),
        ));
    }
    Ok(linear(s, "segproj", seg_feature)? + ctx)
}

/// The four input segments in their fixed order.
#[derive(Clone, Copy, Default)]
pub struct PromptBundle<'t> {
    pub probability: Option<Var<'t>>,
    pub location: Option<Var<'t>>,
    pub question: Option<Var<'t>>,
    pub vision: Option<Var<'t>>,
}

/// Flat sequence plus the start offset of each segment.
#[derive(Clone, Copy)]
pub struct AssembledInput<'t> {
    pub sequence: Var<'t>,
    pub boundaries: [usize; 4],
}

impl<'t> AssembledInput<'t> {
    /// Segment `k` (0 probability, 1 location, 2 question, 3 vision).
    pub fn segment(&self, k: usize) -> Var<'t> {
        let end = if k + 1 < 4 {
            self.boundaries[k + 1]
        } else {
            self.sequence.rows()
        };
        self.sequence.slice_rows(self.boundaries[k], end)
    }
}

impl<'t> PromptBundle<'t> {
    pub fn assemble(&self) -> Result<AssembledInput<'t>> {
        let parts = [
            self.probability
                .ok_or(Error::IncompleteBundle("probability"))?,
            self.location.ok_or(Error::IncompleteBundle("location"))?,
            self.question.ok_or(Error::IncompleteBundle("question"))?,
            self.vision.ok_or(Error::IncompleteBundle("vision"))?,
        ];
        let width = parts[0].cols();
        if let Some(p) = parts.iter().find(|p| p.cols() != width) {
            return Err(Error::shape(format!("width {width}"), p.cols()));
        }
        let mut boundaries = [0; 4];
        for k in 1..4 {
            boundaries[k] = boundaries[k - 1] + parts[k - 1].rows();
        }
        Ok(AssembledInput {
            sequence: parts[0].tape().concat_rows(&parts),
            boundaries,
        })
    }
}
