//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use mgffd_core::checkpoint::Checkpoint;
use mgffd_core::dataset::{
    build_items, dataset_vocabulary, synth_pairs, DatasetItem, TemplateStore,
};
use mgffd_core::model::{Model, ModelConfig};

pub const IMAGE_SIZE: usize = 64;

/// Synthetic items at the default model resolution and an untrained
/// checkpoint whose vocabulary covers them.
pub fn fixture(images: usize, seed: u64) -> (Vec<DatasetItem>, Checkpoint) {
    let t = TemplateStore::default();
    let pairs = synth_pairs(images.div_ceil(3), IMAGE_SIZE, seed);
    let items =
        build_items(&pairs, seed, &t, Some(images), &BTreeMap::new()).expect("synthetic corpus");
    let vocab = dataset_vocabulary(&items, &t);
    let model = Model::new(ModelConfig::default(), vocab, seed).expect("default model");
    (items, Checkpoint { stage: 0, model })
}
