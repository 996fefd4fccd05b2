#![allow(dead_code)]

use clipdistill::encoders::{TextConfig, ViTConfig};
use clipdistill::train::TrainConfig;

/// A model small enough to train a few epochs in well under a second.
pub fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 11;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.corpus.train_size = 32;
    cfg.corpus.eval_size = 24;
    cfg.vit = ViTConfig {
        image_size: 16,
        patch_size: 4,
        depth: 2,
        width: 16,
        heads: 2,
        proj_dim: 8,
        keep_rate: 0.7,
        sparsify_layers: None,
        channels: 3,
    };
    cfg.text = TextConfig {
        depth: 1,
        width: 16,
        heads: 2,
        proj_dim: 8,
        ..TextConfig::default()
    };
    cfg
}

pub fn bytes(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
