//! Desk-scale Vision Transformer with controllable dropout masks.

pub mod checkpoint;
mod config;
pub mod drop;
mod params;
pub mod vit;

pub use config::ModelConfig;
pub use drop::{sample_drop_config, DropConfig, DropMode, DropRealization, ForwardMasks, MaskLog};
pub use params::{init_params, is_decayed, BlockWeights, ModelParams, Weights};
pub use vit::{
    backward, count_correct, forward, forward_cached, loss_and_grads, predict, softmax_cross_entropy,
    ForwardCache, GradRequest, Gradients, LossEval,
};
