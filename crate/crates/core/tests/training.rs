use std::collections::BTreeMap;

use mgffd_core::checkpoint::{snapshot, Checkpoint};
use mgffd_core::dataset::{
    build_items, dataset_vocabulary, synth_pairs, DatasetItem, TemplateStore,
};
use mgffd_core::model::{Model, ModelConfig};
use mgffd_core::params::{bit_identical, ParamGroup};
use mgffd_core::training::{run_stage, LossKind, StageConfig};
use mgffd_core::Error;

fn tiny(images: usize, seed: u64) -> (Vec<DatasetItem>, Checkpoint) {
    let t = TemplateStore::default();
    let pairs = synth_pairs(images.div_ceil(3), 16, seed);
    let items = build_items(&pairs, seed, &t, Some(images), &BTreeMap::new()).unwrap();
    let vocab = dataset_vocabulary(&items, &t);
    let model = Model::new(ModelConfig::tiny(), vocab, seed).unwrap();
    (items, Checkpoint { stage: 0, model })
}

fn stage(n: u8, steps: usize) -> StageConfig {
    let mut cfg = StageConfig::toy(n).unwrap();
    cfg.steps = steps;
    cfg.batch_size = 6;
    cfg
}

#[test]
fn zero_steps_leave_the_checkpoint_identical() {
    let (items, mut ck) = tiny(6, 1);
    let before = ck.clone();
    let report = run_stage(&mut ck, &items, &stage(1, 0)).unwrap();
    assert!(report.history.is_empty());
    assert_eq!(ck.model, before.model);
}

#[test]
fn stage_one_keeps_the_language_model_bit_identical() {
    let (items, mut ck) = tiny(12, 2);
    let before = snapshot(&ck.model.store);
    run_stage(&mut ck, &items, &stage(1, 20)).unwrap();
    let mut moved = 0;
    for (name, p) in ck.model.store.iter() {
        let same = bit_identical(&before[name], &p.value);
        match p.group {
            ParamGroup::VisionEncoder | ParamGroup::SegDecoder | ParamGroup::ClsHead => {
                moved += usize::from(!same)
            }
            _ => assert!(same, "{name} changed outside the stage-1 groups"),
        }
    }
    assert!(moved > 0);
    assert_eq!(ck.stage, 1);
}

#[test]
fn later_stages_require_their_predecessor() {
    let (items, mut ck) = tiny(6, 3);
    for s in [2u8, 3] {
        let e = run_stage(&mut ck, &items, &stage(s, 1)).unwrap_err();
        assert!(matches!(e, Error::StageOrder(_)), "{e}");
    }
    run_stage(&mut ck, &items, &stage(1, 1)).unwrap();
    let e = run_stage(&mut ck, &items, &stage(0, 1)).unwrap_err();
    assert!(matches!(e, Error::StageOrder(_)), "{e}");
    run_stage(&mut ck, &items, &stage(2, 1)).unwrap();
    run_stage(&mut ck, &items, &stage(3, 1)).unwrap();
}

#[test]
fn inactive_losses_are_reported_as_zero() {
    let (items, mut ck) = tiny(6, 4);
    let report = run_stage(&mut ck, &items, &stage(1, 3)).unwrap();
    for s in &report.history {
        assert_eq!((s.text, s.fine_grained, s.calibration), (0.0, 0.0, 0.0));
        assert!(s.binary > 0.0 && s.segmentation > 0.0);
        assert!((s.total - (s.binary + s.segmentation)).abs() < 1e-12);
    }
}

#[test]
fn segmentation_loss_falls_on_box_masks() {
    let (items, mut ck) = tiny(21, 5);
    let mut cfg = stage(1, 200);
    cfg.active_losses = [LossKind::Segmentation].into();
    let report = run_stage(&mut ck, &items, &cfg).unwrap();
    let (start, end) = report.start_end_means(10).unwrap();
    assert!(end < 0.5 * start, "L_s {start} -> {end}");
}

#[test]
fn equal_seeds_train_identically() {
    let run = || {
        let (items, mut ck) = tiny(9, 6);
        run_stage(&mut ck, &items, &stage(1, 5)).unwrap();
        ck.to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}
