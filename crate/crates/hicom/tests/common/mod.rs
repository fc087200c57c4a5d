#![allow(dead_code)]

use std::path::Path;

use hicom::config::{RunConfig, TrainSettings};

/// Desk profile shrunk to seconds: few clips, two epochs, small samples.
pub fn tiny_config(root: &Path, clips: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg.data.clips = clips;
    let t = &mut cfg.training;
    let few = |batch, n| TrainSettings {
        epochs: 2,
        batch_size: batch,
        samples_per_epoch: Some(n),
        lr: Some(1e-3),
        augment: false,
    };
    t.m1 = few(4, 16);
    t.m2 = few(4, 16);
    t.gaze = few(16, 64);
    t.face_attributes = few(16, 64);
    t.body_attributes = few(16, 64);
    cfg.evaluation.severities = vec![3];
    cfg
}
