//! JSON checkpoints: configuration, vocabulary, adapter layout, stage tag,
//! group manifest, and every parameter. Maps are ordered, so equal models
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::lora::LoraLayout;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::text::Vocabulary;

pub const FORMAT: &str = "mgffd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    group: ParamGroup,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    /// Last completed stage; 0 for an untrained or LM-warm-started model.
    stage: u8,
    config: ModelConfig,
    vocab: Vocabulary,
    layout: LoraLayout,
    manifest: BTreeMap<ParamGroup, Vec<String>>,
    params: BTreeMap<String, ParamEntry>,
}

/// A model together with the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub model: Model,
}

fn json_err(context: &Path, e: serde_json::Error) -> Error {
    Error::Json {
        context: context.display().to_string(),
        source: e,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let params = m
            .store
            .iter()
            .map(|(k, p)| {
                let (r, c) = p.value.dim();
                let data = p.value.as_standard_layout().iter().copied().collect();
                (
                    k.clone(),
                    ParamEntry {
                        group: p.group,
                        shape: [r, c],
                        data,
                    },
                )
            })
            .collect();
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            stage: self.stage,
            config: m.config.clone(),
            vocab: m.vocab.clone(),
            layout: m.layout.clone(),
            manifest: m.store.manifest(),
            params,
        };
        serde_json::to_vec(&file).map_err(|e| json_err(Path::new("checkpoint"), e))
    }

    pub fn from_bytes(bytes: &[u8], context: &Path) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_slice(bytes).map_err(|e| json_err(context, e))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                context.display(),
                file.format,
                file.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, e) in file.params {
            let m = Matrix::from_shape_vec((e.shape[0], e.shape[1]), e.data).map_err(|_| {
                Error::shape(format!("{:?}", e.shape), format!("data for `{name}`"))
            })?;
            store.insert(name, e.group, m)?;
        }
        if store.manifest() != file.manifest {
            return Err(Error::Config(format!(
                "{}: manifest does not match parameters",
                context.display()
            )));
        }
        let model = Model {
            config: file.config,
            vocab: file.vocab,
            store,
            layout: file.layout,
        };
        model.config.validate()?;
        if model.config.lm.vocab_size != model.vocab.len() {
            return Err(Error::Config(format!(
                "{}: vocabulary size mismatch",
                context.display()
            )));
        }
        Ok(Self {
            stage: file.stage,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Shares parameter storage; cheap to call per training step.
pub fn snapshot(store: &ParamStore) -> BTreeMap<String, Arc<Matrix>> {
    store
        .iter()
        .map(|(k, p)| (k.clone(), Arc::clone(&p.value)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> Model {
        let vocab = Vocabulary::build(["It is a real face.", "This is an example of a fake face"]);
        Model::new(ModelConfig::tiny(), vocab, seed).unwrap()
    }

    #[test]
    fn bytes_round_trip_to_an_equal_checkpoint() {
        let ck = Checkpoint {
            stage: 2,
            model: model(3),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let ck = Checkpoint {
            stage: 1,
            model: model(5),
        };
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn equal_seeds_give_identical_bytes() {
        let a = Checkpoint {
            stage: 0,
            model: model(9),
        }
        .to_bytes()
        .unwrap();
        let b = Checkpoint {
            stage: 0,
            model: model(9),
        }
        .to_bytes()
        .unwrap();
        let c = Checkpoint {
            stage: 0,
            model: model(10),
        }
        .to_bytes()
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let ck = Checkpoint {
            stage: 0,
            model: model(1),
        };
        let mut v: serde_json::Value = serde_json::from_slice(&ck.to_bytes().unwrap()).unwrap();
        v["format"] = "other".into();
        assert!(Checkpoint::from_bytes(v.to_string().as_bytes(), Path::new("x")).is_err());
        let mut v: serde_json::Value = serde_json::from_slice(&ck.to_bytes().unwrap()).unwrap();
        v["params"].as_object_mut().unwrap().remove("cls.w");
        assert!(matches!(
            Checkpoint::from_bytes(v.to_string().as_bytes(), Path::new("x")),
            Err(Error::Config(_))
        ));
        assert!(Checkpoint::from_bytes(b"{", Path::new("x")).is_err());
    }
}
