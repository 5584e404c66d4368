#![allow(dead_code)]

use std::path::Path;

use scenepose_core::skeleton::KinematicTree;
use scenepose_core::synthdata::{make_dataset, DatasetSpec};
use scenepose_model::grouping::HierarchyConfig;
use scenepose_model::stage2::EnvEncoderKind;
use scenepose_pipeline::TrainConfig;

/// Writes a small dataset under `dir`.
pub fn dataset(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    make_dataset(n_train, n_test, seed, dir, &DatasetSpec::default(), &KinematicTree::smpl_lite()).unwrap();
}

/// A configuration small enough for unit-scale training runs.
pub fn tiny_config(dataset: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.dataset = dataset.to_path_buf();
    cfg.data.train_stride = 20;
    cfg.model.stage1.d_model = 16;
    cfg.model.stage1.layers = 1;
    cfg.model.stage1.heads = 2;
    cfg.model.stage1.ff_mult = 2;
    let s2 = &mut cfg.model.stage2;
    s2.d_model = 16;
    s2.env_dim = 16;
    s2.attn_dim = 16;
    s2.flat_width = 16;
    s2.salience_hidden = 8;
    s2.encoder = EnvEncoderKind::Flat;
    s2.hierarchy = HierarchyConfig {
        centers1: 16,
        radius1: 0.4,
        neighbors1: 4,
        centers2: 4,
        radius2: 0.8,
        neighbors2: 4,
        width1: 8,
        width2: 8,
    };
    cfg.variant.n_points = 64;
    cfg.optim.lr = 1e-3;
    cfg.optim.batch_size = 4;
    cfg.optim.stage1_motion_steps = 10;
    cfg.optim.stage1_uncertainty_steps = 5;
    cfg.optim.stage2_frozen_steps = 5;
    cfg.optim.stage2_joint_steps = 0;
    cfg.optim.log_every = 1000;
    cfg
}
