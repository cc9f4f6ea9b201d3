use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vision Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub stochdepth_p: f64,
}

impl Default for ModelConfig {
    /// 32 x 32 RGB, 4-pixel patches, width 64, six blocks of four heads.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 6,
            n_heads: 4,
            mlp_dim: 128,
            n_classes: 10,
            dropout_p: 0.1,
            stochdepth_p: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("n_heads", self.n_heads),
            ("mlp_dim", self.mlp_dim),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        for (name, p) in [("dropout_p", self.dropout_p), ("stochdepth_p", self.stochdepth_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("model.{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}
