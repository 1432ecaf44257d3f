//! Answer composition for the local, classification, quality, and common
//! question kinds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ForgeryRegion, ImageSample, Label, QAPair, QaKind, TemplateStore, Q_CLASSIFY, Q_LOCAL,
    Q_QUALITY, REAL_ANSWER, T_LABEL,
};
use crate::error::{Error, Result};
use crate::quality::{QualityAttribute, QualityIndicators};
use crate::text::authenticity_position;

/// Human-written question and answer for an image, passed through verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonAnnotation {
    pub question: String,
    pub answer: String,
}

fn pair(image_id: &str, kind: QaKind, question: &str, answer: String, is_fake: bool) -> QAPair {
    QAPair {
        image_id: image_id.to_owned(),
        kind,
        question: question.to_owned(),
        authenticity_word_index: authenticity_position(&answer),
        answer,
        is_fake_label: is_fake,
    }
}

/// `T_label T_region T_type` for forged images, the real-face sentence
/// otherwise. A fake image without a recorded region is described as a
/// whole-face manipulation and gets no type sentence.
pub fn compose_local_answer(
    sample: &ImageSample,
    templates: &TemplateStore,
    rng_seed: u64,
) -> Result<QAPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let answer = match sample.label {
        Label::Real => REAL_ANSWER.to_owned(),
        Label::Blend | Label::Fake => {
            let (region, ty) = match sample.label {
                Label::Blend => {
                    let incomplete = |reason: &str| Error::IncompleteSample {
                        id: sample.id.clone(),
                        reason: reason.to_owned(),
                    };
                    (
                        sample
                            .forgery_region
                            .ok_or_else(|| incomplete("blend without forgery region"))?,
                        Some(
                            sample
                                .forgery_type
                                .ok_or_else(|| incomplete("blend without forgery type"))?,
                        ),
                    )
                }
                _ => (
                    sample.forgery_region.unwrap_or(ForgeryRegion::WholeFace),
                    sample.forgery_type,
                ),
            };
            let mut parts = vec![T_LABEL, templates.region_sentence(region, &mut rng)?];
            if let Some(ty) = ty {
                parts.push(templates.type_sentence(ty, &mut rng)?);
            }
            parts.join(" ")
        }
    };
    Ok(pair(
        &sample.id,
        QaKind::Local,
        Q_LOCAL,
        answer,
        sample.label.is_fake(),
    ))
}

pub fn compose_classify_answer(
    sample: &ImageSample,
    templates: &TemplateStore,
    rng_seed: u64,
) -> Result<QAPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let is_fake = sample.label.is_fake();
    let answer = templates.classify_sentence(is_fake, &mut rng)?.to_owned();
    Ok(pair(
        &sample.id,
        QaKind::Classify,
        Q_CLASSIFY,
        answer,
        is_fake,
    ))
}

/// Six sentences, one per attribute in canonical order, each drawn from
/// the list of the attribute's level.
pub fn compose_quality_answer(
    image_id: &str,
    is_fake: bool,
    q: &QualityIndicators,
    templates: &TemplateStore,
    rng_seed: u64,
) -> Result<QAPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut parts = Vec::with_capacity(QualityAttribute::ORDER.len());
    for attr in QualityAttribute::ORDER {
        let level = q.level(attr)?;
        parts.push(templates.quality_sentence(attr, level, &mut rng)?);
    }
    Ok(pair(
        image_id,
        QaKind::Quality,
        Q_QUALITY,
        parts.join(" "),
        is_fake,
    ))
}

/// Local, optional common, classification, and quality records, in that
/// order.
pub fn assemble_qa_set(
    sample: &ImageSample,
    q: &QualityIndicators,
    templates: &TemplateStore,
    rng_seed: u64,
    common: Option<&CommonAnnotation>,
) -> Result<Vec<QAPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let seeds: [u64; 3] = std::array::from_fn(|_| rng.random());
    let mut out = vec![compose_local_answer(sample, templates, seeds[0])?];
    if let Some(c) = common {
        out.push(pair(
            &sample.id,
            QaKind::Common,
            &c.question,
            c.answer.clone(),
            sample.label.is_fake(),
        ));
    }
    out.push(compose_classify_answer(sample, templates, seeds[1])?);
    out.push(compose_quality_answer(
        &sample.id,
        sample.label.is_fake(),
        q,
        templates,
        seeds[2],
    )?);
    Ok(out)
}
