use serde::{Deserialize, Serialize};

use crate::attack::PixelSpec;
use crate::backbone::DropMode;
use crate::error::{Error, Result};
use crate::pyramid::{PyramidSpec, RandomMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Clean loss only.
    Baseline,
    /// PGD with a single per-pixel level (`pixel_attack`).
    PixelAt,
    /// PGD over the pyramid in `attack`.
    PyramidAt,
    /// One full-budget sign-random draw at the `pixel_attack` budget.
    RandomPixel,
    /// One full-budget sign-random draw of the `attack` pyramid.
    RandomPyramid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Weight of the adversarial loss; ignored by `baseline`.
    pub lambda: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub drop_mode: DropMode,
    pub attack: PyramidSpec,
    pub pixel_attack: PixelSpec,
    /// Not read from configuration files; run harnesses set it from their global seed.
    #[serde(skip)]
    pub seed: u64,
    /// Write `ckpt_<step>.bin` every this many steps (0 disables; the final step is always saved).
    pub checkpoint_every: u64,
    /// Flip and pad-crop each training batch.
    pub augment: bool,
    /// Sequential run with `wall_time_s` written as 0 so metrics files are reproducible.
    pub reference_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::PyramidAt,
            lambda: 1.0,
            weight_decay: 0.05,
            base_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 64,
            drop_mode: DropMode::Matched,
            attack: PyramidSpec::desk_default(),
            pixel_attack: PixelSpec::default(),
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            reference_mode: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("trainer.total_steps must be positive"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "trainer.warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("trainer.base_lr must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("trainer.lambda must be nonnegative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("trainer.weight_decay must be nonnegative"));
        }
        if let Some(spec) = self.attack_spec() {
            spec.validate()?;
        }
        Ok(())
    }

    /// Perturbation used by the regime, or `None` for the baseline.
    pub fn attack_spec(&self) -> Option<PyramidSpec> {
        let with_mode = |spec: PyramidSpec, random_mode| PyramidSpec { random_mode, ..spec };
        match self.regime {
            Regime::Baseline => None,
            Regime::PixelAt => Some(with_mode(self.pixel_attack.to_pyramid(), RandomMode::Adversarial)),
            Regime::PyramidAt => Some(with_mode(self.attack.clone(), RandomMode::Adversarial)),
            Regime::RandomPixel => Some(with_mode(self.pixel_attack.to_pyramid(), RandomMode::RandomSign)),
            Regime::RandomPyramid => Some(with_mode(self.attack.clone(), RandomMode::RandomSign)),
        }
    }

    /// Effective adversarial weight.
    pub fn adv_weight(&self) -> f64 {
        match self.regime {
            Regime::Baseline => 0.0,
            _ => self.lambda,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps as f64, cfg.total_steps as f64);
    let s = step as f64;
    if step < cfg.warmup_steps {
        cfg.base_lr * s / w
    } else if step >= cfg.total_steps {
        0.0
    } else {
        let progress = (s - w) / (t - w);
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
