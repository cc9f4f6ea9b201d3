//! Externally controlled dropout and stochastic-depth realizations.
//!
//! A [`DropRealization`] is a pure function from `(seed, site path, batch
//! index, element index)` to a keep bit, so two forward passes that share a
//! realization see identical masks no matter how often or in which order
//! they run. [`DropConfig`] assigns realizations to the clean, attack and
//! adversarial branches of one training step according to a [`DropMode`].

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// How the branches of a training step share masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// One realization for clean, attack and adversarial passes.
    Matched,
    /// Clean pass uses one realization; attack and adversarial passes share an independent one.
    Unmatched,
    /// Clean pass samples masks; attack and adversarial passes keep everything.
    DisabledAdv,
    /// No dropout or stochastic depth anywhere.
    DisabledAll,
}

/// Masks actually applied during one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardMasks {
    pub branch: String,
    /// `(site path, batch index, keep bits)` in the order they were applied.
    pub masks: Vec<(String, usize, Vec<bool>)>,
}

impl ForwardMasks {
    /// Everything except the branch label.
    pub fn same_masks(&self, other: &ForwardMasks) -> bool {
        self.masks == other.masks
    }
}

pub type MaskLog = Arc<Mutex<Vec<ForwardMasks>>>;

#[derive(Debug, Clone)]
struct MaskRecorder {
    branch: String,
    log: MaskLog,
}

/// One concrete draw of every dropout mask and stochastic-depth gate.
#[derive(Debug, Clone)]
pub struct DropRealization {
    seed: u64,
    dropout_p: f64,
    stochdepth_p: f64,
    recorder: Option<MaskRecorder>,
}

impl PartialEq for DropRealization {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed
            && self.dropout_p == other.dropout_p
            && self.stochdepth_p == other.stochdepth_p
    }
}

impl DropRealization {
    /// Keeps every unit.
    pub fn disabled() -> Self {
        Self {
            seed: 0,
            dropout_p: 0.0,
            stochdepth_p: 0.0,
            recorder: None,
        }
    }

    pub fn sampled(seed: u64, dropout_p: f64, stochdepth_p: f64) -> Self {
        Self {
            seed,
            dropout_p,
            stochdepth_p,
            recorder: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn stochdepth_p(&self) -> f64 {
        self.stochdepth_p
    }

    pub fn is_active(&self) -> bool {
        self.dropout_p > 0.0 || self.stochdepth_p > 0.0
    }

    /// Copy of this realization that appends every forward pass's masks to `log`.
    pub fn recording(&self, branch: impl Into<String>, log: &MaskLog) -> Self {
        Self {
            recorder: Some(MaskRecorder {
                branch: branch.into(),
                log: Arc::clone(log),
            }),
            ..self.clone()
        }
    }

    fn site_key(&self, site: &str, batch_index: usize) -> u64 {
        rng::derive(self.seed, &[tags::DROP, rng::hash_str(site), batch_index as u64])
    }

    /// Keep bits for a dropout site, `len` elements of one example.
    pub fn dropout_keep(&self, site: &str, batch_index: usize, len: usize) -> Vec<bool> {
        if self.dropout_p == 0.0 {
            return vec![true; len];
        }
        let key = self.site_key(site, batch_index);
        (0..len)
            .map(|i| rng::unit_from_hash(rng::derive(key, &[i as u64])) >= self.dropout_p)
            .collect()
    }

    /// Keep gate of one residual block for one example.
    pub fn depth_keep(&self, block: usize, batch_index: usize) -> bool {
        if self.stochdepth_p == 0.0 {
            return true;
        }
        let key = self.site_key(&format!("blocks.{block}.depth"), batch_index);
        rng::unit_from_hash(key) >= self.stochdepth_p
    }

    /// Inverted-dropout multipliers (`0` or `1/(1-p)`), or `None` when nothing is dropped.
    pub(crate) fn dropout_scale<T: Scalar>(
        &self,
        site: &str,
        batch_index: usize,
        len: usize,
        trace: &mut Option<ForwardMasks>,
    ) -> Option<Vec<T>> {
        if self.dropout_p == 0.0 && trace.is_none() {
            return None;
        }
        let keep = self.dropout_keep(site, batch_index, len);
        let scale = T::of(1.0 / (1.0 - self.dropout_p));
        let out = (self.dropout_p > 0.0)
            .then(|| keep.iter().map(|&k| if k { scale } else { T::zero() }).collect());
        if let Some(t) = trace {
            t.masks.push((site.to_string(), batch_index, keep));
        }
        out
    }

    /// Residual multiplier for a block: `0` when dropped, `1/(1-p)` when kept.
    pub(crate) fn depth_scale<T: Scalar>(
        &self,
        block: usize,
        batch_index: usize,
        trace: &mut Option<ForwardMasks>,
    ) -> T {
        let keep = self.depth_keep(block, batch_index);
        if let Some(t) = trace {
            t.masks
                .push((format!("blocks.{block}.depth"), batch_index, vec![keep]));
        }
        if keep {
            T::of(1.0 / (1.0 - self.stochdepth_p))
        } else {
            T::zero()
        }
    }

    pub(crate) fn start_trace(&self) -> Option<ForwardMasks> {
        self.recorder.as_ref().map(|r| ForwardMasks {
            branch: r.branch.clone(),
            masks: Vec::new(),
        })
    }

    pub(crate) fn finish_trace(&self, trace: Option<ForwardMasks>) {
        if let (Some(r), Some(t)) = (&self.recorder, trace) {
            r.log.lock().expect("mask log poisoned").push(t);
        }
    }
}

/// Realizations for the branches of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct DropConfig {
    pub mode: DropMode,
    pub seed: u64,
    clean: DropRealization,
    attack: DropRealization,
    adversarial: DropRealization,
}

impl DropConfig {
    /// Same realizations, recording masks into `log` under the branch
    /// labels `clean`, `attack` and `adversarial`.
    pub fn recording(&self, log: &MaskLog) -> Self {
        Self {
            mode: self.mode,
            seed: self.seed,
            clean: self.clean.recording("clean", log),
            attack: self.attack.recording("attack", log),
            adversarial: self.adversarial.recording("adversarial", log),
        }
    }

    pub fn clean(&self) -> &DropRealization {
        &self.clean
    }

    /// Used by every attack-generation forward pass.
    pub fn attack(&self) -> &DropRealization {
        &self.attack
    }

    pub fn adversarial(&self) -> &DropRealization {
        &self.adversarial
    }
}

/// Draws the step's realizations. Probabilities come from `config`.
pub fn sample_drop_config(config: &ModelConfig, mode: DropMode, seed: u64) -> DropConfig {
    let sampled = |s| DropRealization::sampled(s, config.dropout_p, config.stochdepth_p);
    let (clean, adversarial) = match mode {
        DropMode::Matched => (sampled(seed), sampled(seed)),
        DropMode::Unmatched => (
            sampled(seed),
            sampled(rng::derive(seed, &[tags::DROP_UNMATCHED])),
        ),
        DropMode::DisabledAdv => (sampled(seed), DropRealization::disabled()),
        DropMode::DisabledAll => (DropRealization::disabled(), DropRealization::disabled()),
    };
    DropConfig {
        mode,
        seed,
        clean,
        attack: adversarial.clone(),
        adversarial,
    }
}
