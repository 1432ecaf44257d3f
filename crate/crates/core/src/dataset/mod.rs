//! DD-VQA+ style dataset construction: blended images with region/type
//! answers, quality answers, classification answers, and the JSONL format
//! that carries them.

mod blend;
mod build;
mod compose;
mod records;
mod synth;
mod templates;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

pub use blend::{
    blend_with_mask, corrupt_source, make_blend, make_blend_with_type, region_mask, sample_region,
    sample_type,
};
pub use build::{
    build_dataset, build_items, dataset_vocabulary, load_pair_dir, write_items, write_pair_dir,
    BuildConfig, BuildSummary, COMMON_FILE,
};
pub use compose::{
    assemble_qa_set, compose_classify_answer, compose_local_answer, compose_quality_answer,
    CommonAnnotation,
};
pub use records::{
    load_items, read_jsonl, write_jsonl, DatasetItem, DatasetRecord, DATASET_FILE, IMAGE_DIR,
    MASK_DIR, VOCAB_FILE,
};
pub use synth::{synth_face, synth_fake, synth_pairs};
pub use templates::TemplateStore;

pub const Q_LOCAL: &str = "Do you think this image is of a real face or an altered fake one?";
pub const Q_QUALITY: &str = "Please evaluate the quality of this face image.";
pub const Q_CLASSIFY: &str = "Is this image real or fake?";
pub const T_LABEL: &str = "This is an example of a fake face";
pub const REAL_ANSWER: &str = "It is a real face.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
    Blend,
}

impl Label {
    pub fn is_fake(self) -> bool {
        self != Label::Real
    }
}

macro_rules! snake_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

snake_enum!(Label { Real => "real", Fake => "fake", Blend => "blend" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryRegion {
    Mouth,
    Nose,
    Eyes,
    WholeFace,
}

snake_enum!(ForgeryRegion {
    Mouth => "mouth",
    Nose => "nose",
    Eyes => "eyes",
    WholeFace => "whole_face",
});

impl ForgeryRegion {
    pub const ALL: [ForgeryRegion; 4] = [
        ForgeryRegion::Mouth,
        ForgeryRegion::Nose,
        ForgeryRegion::Eyes,
        ForgeryRegion::WholeFace,
    ];

    /// Fractional box `(y0, y1, x0, x1)` on an aligned face.
    pub fn bounds(self) -> (f64, f64, f64, f64) {
        match self {
            ForgeryRegion::Eyes => (0.22, 0.45, 0.15, 0.85),
            ForgeryRegion::Nose => (0.40, 0.66, 0.35, 0.65),
            ForgeryRegion::Mouth => (0.64, 0.86, 0.25, 0.75),
            ForgeryRegion::WholeFace => (0.0, 1.0, 0.0, 1.0),
        }
    }
}

/// Corruption applied to the pasted region of a blend. The list has room
/// for a fifth, currently unnamed, type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryType {
    Blur,
    StructureAbnormal,
    ColorDifference,
    BlendBoundary,
}

snake_enum!(ForgeryType {
    Blur => "blur",
    StructureAbnormal => "structure_abnormal",
    ColorDifference => "color_difference",
    BlendBoundary => "blend_boundary",
});

impl ForgeryType {
    pub const ALL: [ForgeryType; 4] = [
        ForgeryType::Blur,
        ForgeryType::StructureAbnormal,
        ForgeryType::ColorDifference,
        ForgeryType::BlendBoundary,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    Local,
    Common,
    Classify,
    Quality,
}

snake_enum!(QaKind {
    Local => "local",
    Common => "common",
    Classify => "classify",
    Quality => "quality",
});

impl QaKind {
    pub const ALL: [QaKind; 4] = [
        QaKind::Local,
        QaKind::Common,
        QaKind::Classify,
        QaKind::Quality,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Image,
    pub label: Label,
    pub mask: Option<Mask>,
    pub source_real_id: Option<String>,
    pub forgery_region: Option<ForgeryRegion>,
    pub forgery_type: Option<ForgeryType>,
}

impl ImageSample {
    pub fn real(id: impl Into<String>, pixels: Image) -> Self {
        Self {
            id: id.into(),
            pixels,
            label: Label::Real,
            mask: None,
            source_real_id: None,
            forgery_region: None,
            forgery_type: None,
        }
    }

    /// A fully manipulated image paired with the real image `source_real_id`.
    pub fn fake(id: impl Into<String>, pixels: Image, source_real_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            pixels,
            label: Label::Fake,
            mask: None,
            source_real_id: Some(source_real_id.into()),
            forgery_region: None,
            forgery_type: None,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    /// Checks the label-dependent invariants.
    pub fn validate(&self) -> Result<()> {
        let incomplete = |reason: &str| Error::IncompleteSample {
            id: self.id.clone(),
            reason: reason.to_owned(),
        };
        if self.pixels.dim().2 != 3 {
            return Err(Error::shape("H×W×3", format!("{:?}", self.pixels.dim())));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "{}: pixel outside [0, 1]",
                self.id
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != self.size() {
                return Err(Error::shape(
                    format!("{:?}", self.size()),
                    format!("{:?}", m.dim()),
                ));
            }
        }
        match self.label {
            Label::Blend => {
                if self.mask.is_none() {
                    return Err(incomplete("blend without mask"));
                }
                if self.forgery_region.is_none() {
                    return Err(incomplete("blend without forgery region"));
                }
                if self.forgery_type.is_none() {
                    return Err(incomplete("blend without forgery type"));
                }
                if self.source_real_id.is_none() {
                    return Err(incomplete("blend without source image"));
                }
            }
            Label::Real => {
                if self.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v)) {
                    return Err(incomplete("real image with a nonzero mask"));
                }
            }
            Label::Fake => {}
        }
        Ok(())
    }
}

/// One question-answer record bound to an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub image_id: String,
    pub kind: QaKind,
    pub question: String,
    pub answer: String,
    pub authenticity_word_index: Option<usize>,
    pub is_fake_label: bool,
}

/// Stable per-sample seed derived from a global seed and an id.
pub fn derive_seed(global: u64, id: &str) -> u64 {
    // FNV-1a over the id, then a splitmix64 finalizer with the global seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ global.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for r in ForgeryRegion::ALL {
            assert_eq!(r.as_str().parse::<ForgeryRegion>().unwrap(), r);
            assert_eq!(
                serde_json::to_string(&r).unwrap(),
                format!("\"{}\"", r.as_str())
            );
        }
        for t in ForgeryType::ALL {
            assert_eq!(t.as_str().parse::<ForgeryType>().unwrap(), t);
        }
        assert!(matches!(
            "forehead".parse::<ForgeryRegion>(),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn blend_invariants_are_checked() {
        let mut s = ImageSample::real("a", Image::zeros((4, 4, 3)));
        s.validate().unwrap();
        s.label = Label::Blend;
        assert!(matches!(s.validate(), Err(Error::IncompleteSample { .. })));
        let mut r = ImageSample::real("b", Image::zeros((4, 4, 3)));
        r.mask = Some(Mask::from_elem((4, 4), true));
        assert!(r.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_id() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
    }
}
