#![allow(dead_code)]

use pyramidat::dataio::{self, DatasetConfig, DatasetHandle};
use pyramidat::trainer::{Regime, TrainConfig};
use pyramidat::{DropMode, ModelConfig};

pub fn tiny_model(dropout_p: f64, stochdepth_p: f64) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        embed_dim: 32,
        depth: 2,
        n_heads: 2,
        mlp_dim: 64,
        n_classes: 2,
        dropout_p,
        stochdepth_p,
    }
}

pub fn shapes(n_train: usize, n_eval: usize, seed: u64) -> DatasetHandle {
    dataio::load_dataset(&DatasetConfig {
        name: "synthetic".into(),
        n_train,
        n_eval,
        image_size: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn train_config(regime: Regime, drop_mode: DropMode) -> TrainConfig {
    TrainConfig {
        regime,
        drop_mode,
        base_lr: 2e-3,
        warmup_steps: 0,
        total_steps: 10,
        batch_size: 16,
        seed: 3,
        augment: false,
        ..Default::default()
    }
}

/// Tiny model trained on the synthetic set without dropout.
pub fn trained_tiny(data: &DatasetHandle, steps: u64, seed: u64) -> pyramidat::Params32 {
    let cfg = TrainConfig {
        regime: Regime::Baseline,
        drop_mode: DropMode::DisabledAll,
        base_lr: 1e-3,
        warmup_steps: steps / 20,
        total_steps: steps,
        batch_size: 64,
        weight_decay: 0.0,
        augment: true,
        seed,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    pyramidat::trainer::train_loop(&cfg, &tiny_model(0.0, 0.0), data, dir.path(), None)
        .unwrap()
        .state
        .params
}
