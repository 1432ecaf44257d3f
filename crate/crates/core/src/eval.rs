//! Text-based detection metrics, BLEU-4, prediction fusion, and dataset
//! evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape};
use crate::dataset::{DatasetItem, QaKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamGroup, Session};
use crate::text::{tokenize, FAKE_WORD, REAL_WORD};
use crate::training::{binary_loss_var, clip_global_norm, Adam};
use crate::vision::VisionCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authenticity {
    Real,
    Fake,
    Ambiguous,
}

/// `fake` or `real` when exactly one of the two words occurs as a token.
pub fn parse_authenticity(answer: &str) -> Authenticity {
    let toks = tokenize(answer);
    let has = |w: &str| toks.iter().any(|t| t.eq_ignore_ascii_case(w));
    match (has(FAKE_WORD), has(REAL_WORD)) {
        (true, false) => Authenticity::Fake,
        (false, true) => Authenticity::Real,
        _ => Authenticity::Ambiguous,
    }
}

/// Confusion counts with fake as the positive class.
///
/// An ambiguous prediction is never correct: on a fake label it is a false
/// negative, on a real label it is counted in `ambiguous` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub acc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ambiguous: usize,
    pub total: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over `(prediction, is_fake)` pairs.
pub fn detection_metrics(pairs: &[(Authenticity, bool)]) -> Result<DetectionMetrics> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "detection metrics need at least one pair".into(),
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_, mut ambiguous) = (0, 0, 0, 0, 0);
    for &(pred, fake) in pairs {
        if pred == Authenticity::Ambiguous {
            ambiguous += 1;
        }
        match (pred, fake) {
            (Authenticity::Fake, true) => tp += 1,
            (Authenticity::Fake, false) => fp += 1,
            (Authenticity::Real, false) => tn += 1,
            (_, true) => fn_ += 1,
            (Authenticity::Ambiguous, false) => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionMetrics {
        acc: ratio(tp + tn, pairs.len()),
        recall,
        precision,
        f1,
        tp,
        fp,
        tn,
        fn_,
        ambiguous,
        total: pairs.len(),
    })
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *out.entry(g).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU-4 over word tokens with uniform weights and the brevity
/// penalty against the closest reference length (shorter on ties). A zero
/// match count for `n > 1` is smoothed to `1 / (count + 1)`.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(&cand, n);
        let total: usize = counts.values().sum();
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let matched: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln() / 4.0;
    }
    let c = cand.len() as i64;
    let r = refs
        .iter()
        .map(|t| t.len() as i64)
        .min_by_key(|&l| ((l - c).abs(), l))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_sum.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Weight of the external prediction.
    pub weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { weight: 0.5 }
    }
}

/// `w·p_external + (1 - w)·p_fused`.
pub fn fuse_predictions(p_external: f64, p_fused: f64, w: f64) -> Result<f64> {
    for (name, v) in [
        ("external probability", p_external),
        ("fused probability", p_fused),
        ("fusion weight", w),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok(w * p_external + (1.0 - w) * p_fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionTraining {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FusionTraining {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
        }
    }
}

fn check_prob(id: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "score {p} for `{id}` outside [0, 1]"
        )));
    }
    Ok(())
}

/// Fits the fusion head on every item with an external score, using full
/// batches and binary cross-entropy. Returns the per-step loss.
pub fn train_fusion_head(
    model: &mut Model,
    items: &[DatasetItem],
    external: &BTreeMap<String, f64>,
    cfg: &FusionTraining,
) -> Result<Vec<f64>> {
    let mut rows = Vec::new();
    for it in items {
        if let Some(&p) = external.get(&it.sample.id) {
            check_prob(&it.sample.id, p)?;
            rows.push((
                model.vision_cache(&it.sample.pixels)?,
                p,
                it.sample.label.is_fake(),
            ));
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "no dataset image has an external score".into(),
        ));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, mut grads) = {
            let tape = Tape::new();
            let s = Session::new(&tape, &model.store).with_trainable([ParamGroup::FusionHead]);
            let mut terms = Vec::with_capacity(rows.len());
            for (cache, p, fake) in &rows {
                let pooled = tape.leaf_shared(cache.pooled.clone(), false);
                let p_ext = tape.constant(Matrix::from_elem((1, 1), *p));
                let logit = model.fusion_logit(&s, pooled, p_ext)?;
                terms.push(binary_loss_var(logit, *fake));
            }
            let loss = tape.concat_rows(&terms).mean();
            (loss.item(), s.param_gradients(&tape.backward(loss)))
        };
        clip_global_norm(&mut grads, 1.0);
        adam.step(&mut model.store, &grads)?;
        history.push(loss);
    }
    Ok(history)
}

/// Fused probability `p_fused` for one image from its cached vision pass.
pub fn fused_probability(model: &Model, cache: &VisionCache, p_external: f64) -> Result<f64> {
    let tape = Tape::new();
    let s = Session::new(&tape, &model.store);
    let pooled = tape.leaf_shared(cache.pooled.clone(), false);
    let p = tape.constant(Matrix::from_elem((1, 1), p_external));
    Ok(model.fusion_probability(&s, pooled, p)?.item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub kind: QaKind,
    pub question: String,
    pub reference: String,
    pub generated: String,
    pub predicted: Authenticity,
    pub is_fake: bool,
    /// Whether the reference answer carries an authenticity word.
    pub scored: bool,
    pub bleu4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub records: usize,
    pub bleu4: f64,
    pub detection: Option<DetectionMetrics>,
}

/// Evaluation report; detection metrics cover the records whose reference
/// answer contains an authenticity word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub metrics: DetectionMetrics,
    pub ambiguous: usize,
    pub bleu4: f64,
    pub per_kind: BTreeMap<QaKind, KindReport>,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_tokens: usize,
    /// Restricts evaluation to these kinds when set.
    pub kinds: Option<Vec<QaKind>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_tokens: 96,
            kinds: None,
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn summarize(preds: &[&Prediction]) -> Result<Option<DetectionMetrics>> {
    let pairs: Vec<_> = preds
        .iter()
        .filter(|p| p.scored)
        .map(|p| (p.predicted, p.is_fake))
        .collect();
    if pairs.is_empty() {
        Ok(None)
    } else {
        detection_metrics(&pairs).map(Some)
    }
}

/// Greedy answers for every selected record, scored against the references.
pub fn evaluate(model: &Model, items: &[DatasetItem], opts: &EvalOptions) -> Result<EvalReport> {
    let mut predictions = Vec::new();
    for it in items {
        let selected: Vec<_> = it
            .qas
            .iter()
            .filter(|qa| opts.kinds.as_ref().is_none_or(|k| k.contains(&qa.kind)))
            .collect();
        if selected.is_empty() {
            continue;
        }
        let cache = model.vision_cache(&it.sample.pixels)?;
        let q = it.quality.quality_vector();
        for qa in selected {
            let generated = model.generate(&cache, &q, &qa.question, opts.max_tokens)?;
            predictions.push(Prediction {
                image_id: it.sample.id.clone(),
                kind: qa.kind,
                question: qa.question.clone(),
                bleu4: bleu4(&generated, &[&qa.answer]),
                reference: qa.answer.clone(),
                predicted: parse_authenticity(&generated),
                generated,
                is_fake: qa.is_fake_label,
                scored: qa.authenticity_word_index.is_some(),
            });
        }
    }
    let all: Vec<&Prediction> = predictions.iter().collect();
    let metrics = summarize(&all)?.ok_or_else(|| {
        Error::InvalidArgument("no evaluated record carries an authenticity word".into())
    })?;
    let mut per_kind = BTreeMap::new();
    for kind in QaKind::ALL {
        let subset: Vec<&Prediction> = predictions.iter().filter(|p| p.kind == kind).collect();
        if subset.is_empty() {
            continue;
        }
        per_kind.insert(
            kind,
            KindReport {
                records: subset.len(),
                bleu4: mean(subset.iter().map(|p| p.bleu4)),
                detection: summarize(&subset)?,
            },
        );
    }
    Ok(EvalReport {
        records: predictions.len(),
        ambiguous: metrics.ambiguous,
        bleu4: mean(predictions.iter().map(|p| p.bleu4)),
        metrics,
        per_kind,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Authenticity::*;

    #[test]
    fn parses_authenticity_words() {
        assert_eq!(parse_authenticity("It is a real face."), Real);
        assert_eq!(
            parse_authenticity("This is an example of a fake face around the eyes."),
            Fake
        );
        assert_eq!(parse_authenticity(""), Ambiguous);
        assert_eq!(parse_authenticity("real or fake?"), Ambiguous);
        assert_eq!(parse_authenticity("unreal fakery"), Ambiguous);
        assert_eq!(parse_authenticity("FAKE."), Fake);
    }

    #[test]
    fn metric_examples() {
        let m =
            detection_metrics(&[(Fake, true), (Fake, false), (Real, true), (Real, false)]).unwrap();
        assert_eq!((m.acc, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
        let m = detection_metrics(&[(Fake, true), (Real, false)]).unwrap();
        assert_eq!((m.acc, m.f1), (1.0, 1.0));
        let m = detection_metrics(&[(Real, false), (Real, false)]).unwrap();
        assert_eq!((m.recall, m.f1, m.acc), (0.0, 0.0, 1.0));
        let m = detection_metrics(&[(Ambiguous, false), (Ambiguous, true)]).unwrap();
        assert_eq!((m.acc, m.ambiguous, m.fn_), (0.0, 2, 1));
        assert!(detection_metrics(&[]).is_err());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = "the face looks blurred around the mouth";
        assert!((bleu4(c, &[c]) - 1.0).abs() < 1e-12);
        assert_eq!(
            bleu4("alpha beta gamma delta", &["one two three four"]),
            0.0
        );
        assert_eq!(bleu4("", &["one two"]), 0.0);
        assert!(bleu4("mouth the around blurred looks face the", &[c]) < 1.0);
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(fuse_predictions(0.3, 0.9, 1.0).unwrap(), 0.3);
        assert_eq!(fuse_predictions(0.3, 0.9, 0.0).unwrap(), 0.9);
        assert!((fuse_predictions(0.8, 0.4, 0.5).unwrap() - 0.6).abs() < 1e-15);
        assert!(fuse_predictions(1.2, 0.4, 0.5).is_err());
        assert!(fuse_predictions(0.2, 0.4, -0.1).is_err());
    }
}
