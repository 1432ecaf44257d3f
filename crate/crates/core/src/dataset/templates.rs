//! Fixed template lists for region, type, classification, and quality
//! sentences.

use std::collections::BTreeMap;

use rand::Rng;

use crate::dataset::{
    ForgeryRegion, ForgeryType, Q_CLASSIFY, Q_LOCAL, Q_QUALITY, REAL_ANSWER, T_LABEL,
};
use crate::error::{Error, Result};
use crate::quality::{Level, QualityAttribute};
use crate::text::{tokenize, FAKE_WORD, REAL_WORD};

type Key = (QualityAttribute, Level);

const QUALITY: &[(QualityAttribute, Level, [&str; 5])] = {
    use Level::*;
    use QualityAttribute::*;
    &[
        (
            Overall,
            High,
            [
                "The overall quality of the image is high.",
                "Overall, the image quality is good.",
                "The image leaves a good overall impression.",
                "The general quality of this picture is high.",
                "Overall, this is a high quality image.",
            ],
        ),
        (
            Overall,
            Mid,
            [
                "The overall quality of the image is moderate.",
                "Overall, the image quality is acceptable.",
                "The image leaves an average overall impression.",
                "The general quality of this picture is fair.",
                "Overall, this is a medium quality image.",
            ],
        ),
        (
            Overall,
            Low,
            [
                "The overall quality of the image is low.",
                "Overall, the image quality is poor.",
                "The image leaves a weak overall impression.",
                "The general quality of this picture is bad.",
                "Overall, this is a low quality image.",
            ],
        ),
        (
            Integrity,
            High,
            [
                "The face is complete and intact.",
                "All parts of the face are well preserved.",
                "The facial integrity is high.",
                "No part of the face is washed out or lost.",
                "The face appears whole and undamaged.",
            ],
        ),
        (
            Integrity,
            Mid,
            [
                "The face is mostly intact.",
                "Some parts of the face are slightly washed out.",
                "The facial integrity is moderate.",
                "A few facial details are lost.",
                "The face appears largely whole with minor losses.",
            ],
        ),
        (
            Integrity,
            Low,
            [
                "Large parts of the face are missing detail.",
                "The face is heavily washed out.",
                "The facial integrity is low.",
                "Much of the face is lost to clipping.",
                "The face appears badly damaged.",
            ],
        ),
        (
            Intensity,
            High,
            [
                "The brightness level on the face is high.",
                "The face is brightly lit.",
                "The illumination on the face is strong.",
                "The face receives plenty of light.",
                "The lighting on the face is bright.",
            ],
        ),
        (
            Intensity,
            Mid,
            [
                "The brightness level on the face is moderate.",
                "The face is reasonably lit.",
                "The illumination on the face is medium.",
                "The face receives a fair amount of light.",
                "The lighting on the face is average.",
            ],
        ),
        (
            Intensity,
            Low,
            [
                "The brightness level on the face is dim.",
                "The face is poorly lit.",
                "The illumination on the face is weak.",
                "The face receives little light.",
                "The lighting on the face is dark.",
            ],
        ),
        (
            Uniformity,
            High,
            [
                "The illumination on the face is even.",
                "Light is spread uniformly across the face.",
                "The lighting uniformity is high.",
                "There are no strong shadows on the face.",
                "The face is evenly illuminated.",
            ],
        ),
        (
            Uniformity,
            Mid,
            [
                "The illumination on the face is somewhat uneven.",
                "Light is spread fairly evenly across the face.",
                "The lighting uniformity is moderate.",
                "There are some shadows on the face.",
                "The face is partly evenly illuminated.",
            ],
        ),
        (
            Uniformity,
            Low,
            [
                "The illumination on the face is very uneven.",
                "Light is spread unevenly across the face.",
                "The lighting uniformity is low.",
                "There are strong shadows on the face.",
                "The face is unevenly illuminated.",
            ],
        ),
        (
            Clarity,
            High,
            [
                "The image is sharp and clear.",
                "The clarity of the image is high.",
                "Fine details are crisp.",
                "The picture shows no visible blur.",
                "Edges in the image are well defined.",
            ],
        ),
        (
            Clarity,
            Mid,
            [
                "The image is fairly clear.",
                "The clarity of the image is moderate.",
                "Fine details are somewhat soft.",
                "The picture shows slight blur.",
                "Edges in the image are reasonably defined.",
            ],
        ),
        (
            Clarity,
            Low,
            [
                "The image is blurry.",
                "The clarity of the image is low.",
                "Fine details are lost.",
                "The picture shows heavy blur.",
                "Edges in the image are poorly defined.",
            ],
        ),
        (
            Visibility,
            High,
            [
                "The face is clearly visible.",
                "The facial visibility is high.",
                "Facial features can be seen easily.",
                "The face stands out clearly.",
                "Every facial feature is easy to make out.",
            ],
        ),
        (
            Visibility,
            Mid,
            [
                "The face is partly visible.",
                "The facial visibility is mid.",
                "Facial features can be seen with some effort.",
                "The face stands out moderately.",
                "Most facial features are easy to make out.",
            ],
        ),
        (
            Visibility,
            Low,
            [
                "The face is hardly visible.",
                "The facial visibility is low.",
                "Facial features are difficult to see.",
                "The face does not stand out.",
                "Few facial features are easy to make out.",
            ],
        ),
    ]
};

const REGION: &[(ForgeryRegion, [&str; 3])] = &[
    (
        ForgeryRegion::Eyes,
        [
            "with manipulated eyes.",
            "in which the eye region has been replaced.",
            "where the eyes were altered.",
        ],
    ),
    (
        ForgeryRegion::Nose,
        [
            "with a manipulated nose.",
            "in which the nose region has been replaced.",
            "where the nose was altered.",
        ],
    ),
    (
        ForgeryRegion::Mouth,
        [
            "with a manipulated mouth.",
            "in which the mouth region has been replaced.",
            "where the mouth was altered.",
        ],
    ),
    (
        ForgeryRegion::WholeFace,
        [
            "with the whole face manipulated.",
            "in which the entire face has been replaced.",
            "where the whole face was altered.",
        ],
    ),
];

const TYPE: &[(ForgeryType, [&str; 3])] = &[
    (
        ForgeryType::Blur,
        [
            "The altered area looks blurry.",
            "The manipulated part shows unnatural blur.",
            "Blur is visible in the edited area.",
        ],
    ),
    (
        ForgeryType::StructureAbnormal,
        [
            "The altered area has an abnormal structure.",
            "The manipulated part looks structurally distorted.",
            "The shape of the edited area is abnormal.",
        ],
    ),
    (
        ForgeryType::ColorDifference,
        [
            "The altered area has a different color.",
            "The manipulated part shows a color mismatch.",
            "The color of the edited area does not match the rest of the face.",
        ],
    ),
    (
        ForgeryType::BlendBoundary,
        [
            "A blending boundary is visible around the altered area.",
            "The manipulated part shows a visible blend boundary.",
            "The edges of the edited area are poorly blended.",
        ],
    ),
];

const CLASSIFY_REAL: [&str; 3] = [
    REAL_ANSWER,
    "This image is real.",
    "The face in this image is real.",
];
const CLASSIFY_FAKE: [&str; 3] = [
    "It is a fake face.",
    "This image is fake.",
    "The face in this image is fake.",
];

/// Sentence lists keyed by quality level, region, and forgery type.
/// Selection is uniform over a list under the caller's generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateStore {
    pub quality: BTreeMap<Key, Vec<String>>,
    pub region: BTreeMap<ForgeryRegion, Vec<String>>,
    pub forgery_type: BTreeMap<ForgeryType, Vec<String>>,
    pub classify_real: Vec<String>,
    pub classify_fake: Vec<String>,
}

fn owned(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn mentions_authenticity(text: &str) -> bool {
    let lower = text.to_lowercase();
    lower.contains(REAL_WORD) || lower.contains(FAKE_WORD)
}

impl Default for TemplateStore {
    fn default() -> Self {
        Self {
            quality: QUALITY
                .iter()
                .map(|(a, l, s)| ((*a, *l), owned(s)))
                .collect(),
            region: REGION.iter().map(|(r, s)| (*r, owned(s))).collect(),
            forgery_type: TYPE.iter().map(|(t, s)| (*t, owned(s))).collect(),
            classify_real: owned(&CLASSIFY_REAL),
            classify_fake: owned(&CLASSIFY_FAKE),
        }
    }
}

fn pick<'a>(list: &'a [String], rng: &mut impl Rng, what: &str) -> Result<&'a str> {
    if list.is_empty() {
        return Err(Error::Config(format!("empty template list for {what}")));
    }
    Ok(&list[rng.random_range(0..list.len())])
}

impl TemplateStore {
    /// Checks that every key has sentences and that descriptive sentences
    /// never mention the authenticity words.
    pub fn validate(&self) -> Result<()> {
        for attr in QualityAttribute::ORDER {
            for level in [Level::Low, Level::Mid, Level::High] {
                let list = self.quality.get(&(attr, level));
                if list.is_none_or(|l| l.is_empty()) {
                    return Err(Error::Config(format!(
                        "no {attr} sentences for level {level:?}"
                    )));
                }
            }
        }
        for r in ForgeryRegion::ALL {
            if self.region.get(&r).is_none_or(|l| l.is_empty()) {
                return Err(Error::Config(format!("no sentences for region {r}")));
            }
        }
        for t in ForgeryType::ALL {
            if self.forgery_type.get(&t).is_none_or(|l| l.is_empty()) {
                return Err(Error::Config(format!("no sentences for type {t}")));
            }
        }
        let descriptive = self
            .quality
            .values()
            .chain(self.region.values())
            .chain(self.forgery_type.values())
            .flatten();
        for s in descriptive {
            if mentions_authenticity(s) {
                return Err(Error::Config(format!(
                    "descriptive sentence mentions authenticity: {s}"
                )));
            }
        }
        for (list, word, other) in [
            (&self.classify_real, REAL_WORD, FAKE_WORD),
            (&self.classify_fake, FAKE_WORD, REAL_WORD),
        ] {
            if list.is_empty() {
                return Err(Error::Config("empty classification answers".into()));
            }
            for s in list {
                let toks = tokenize(&s.to_lowercase());
                if !toks.iter().any(|t| t == word) || toks.iter().any(|t| t == other) {
                    return Err(Error::Config(format!(
                        "classification answer must say `{word}` only: {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn quality_sentence(
        &self,
        attr: QualityAttribute,
        level: Level,
        rng: &mut impl Rng,
    ) -> Result<&str> {
        let list = self
            .quality
            .get(&(attr, level))
            .ok_or_else(|| Error::Config(format!("no {attr} sentences for level {level:?}")))?;
        pick(list, rng, "quality")
    }

    pub fn region_sentence(&self, region: ForgeryRegion, rng: &mut impl Rng) -> Result<&str> {
        let list = self
            .region
            .get(&region)
            .ok_or_else(|| Error::Config(format!("no sentences for region {region}")))?;
        pick(list, rng, "region")
    }

    pub fn type_sentence(&self, ty: ForgeryType, rng: &mut impl Rng) -> Result<&str> {
        let list = self
            .forgery_type
            .get(&ty)
            .ok_or_else(|| Error::Config(format!("no sentences for type {ty}")))?;
        pick(list, rng, "type")
    }

    pub fn classify_sentence(&self, is_fake: bool, rng: &mut impl Rng) -> Result<&str> {
        let list = if is_fake {
            &self.classify_fake
        } else {
            &self.classify_real
        };
        pick(list, rng, "classification")
    }

    /// Every sentence any composer can emit, plus the fixed questions.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![Q_LOCAL, Q_QUALITY, Q_CLASSIFY, T_LABEL, REAL_ANSWER];
        out.extend(self.quality.values().flatten().map(String::as_str));
        out.extend(self.region.values().flatten().map(String::as_str));
        out.extend(self.forgery_type.values().flatten().map(String::as_str));
        out.extend(self.classify_real.iter().map(String::as_str));
        out.extend(self.classify_fake.iter().map(String::as_str));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_store_is_valid() {
        let t = TemplateStore::default();
        t.validate().unwrap();
        assert_eq!(t.quality.len(), 18);
        assert!(t.quality.values().all(|l| l.len() == 5));
    }

    #[test]
    fn anchor_sentences_are_present() {
        let t = TemplateStore::default();
        assert!(t.quality[&(QualityAttribute::Visibility, Level::High)]
            .iter()
            .any(|s| s == "The face is clearly visible."));
        assert!(t.quality[&(QualityAttribute::Intensity, Level::Low)]
            .iter()
            .any(|s| s == "The brightness level on the face is dim."));
    }

    #[test]
    fn authenticity_in_descriptions_is_rejected() {
        let mut t = TemplateStore::default();
        t.region.get_mut(&ForgeryRegion::Nose).unwrap()[0] = "with a fake nose.".into();
        assert!(t.validate().is_err());
    }
}
