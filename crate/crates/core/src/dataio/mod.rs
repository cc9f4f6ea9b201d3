//! Dataset ingestion, splits, augmentation and batching.
//!
//! Pixels are raw `[0, 1]` intensities with no mean/std normalization, so
//! perturbation budgets keep their image-unit meaning.

mod augment;
mod batches;
pub mod cifar;
pub mod synthetic;

use std::path::PathBuf;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};

pub use augment::{augment, flip_horizontal, reflect_pad_crop};
pub use batches::{batches, epoch_order, eval_ranges, train_batch_indices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One split: images, labels, and globally unique example ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub pixels: Array4<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> ImageBatch<f32> {
        ImageBatch {
            pixels: self.pixels.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.pixels = self.pixels.slice_axis(Axis(0), (0..n).into()).to_owned();
            self.labels.truncate(n);
            self.ids.truncate(n);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub n_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub source: Option<PathBuf>,
    pub train: SplitData,
    pub eval: SplitData,
}

impl DatasetHandle {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, s) in [("train", &self.train), ("eval", &self.eval)] {
            if s.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config(format!("{name} split has pixels outside [0, 1]")));
            }
            if s.labels.iter().any(|&l| l >= self.n_classes) {
                return Err(Error::config(format!("{name} split has out-of-range labels")));
            }
        }
        let train: std::collections::HashSet<_> = self.train.ids.iter().collect();
        if self.eval.ids.iter().any(|i| train.contains(i)) {
            return Err(Error::config("train and eval splits overlap"));
        }
        Ok(())
    }
}

/// Dataset selection as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// `synthetic` or `cifar10`.
    pub name: String,
    /// CIFAR-10 directory; falls back to `PYRAMIDAT_DATA_ROOT`.
    pub root: Option<PathBuf>,
    pub seed: u64,
    /// Synthetic only.
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    /// Keep only the first N examples of a split (0 keeps all).
    pub train_limit: usize,
    pub eval_limit: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            root: None,
            seed: 7,
            n_train: 512,
            n_eval: 256,
            image_size: 32,
            train_limit: 0,
            eval_limit: 0,
        }
    }
}

pub const DATA_ROOT_ENV: &str = "PYRAMIDAT_DATA_ROOT";

pub fn load_dataset(cfg: &DatasetConfig) -> Result<DatasetHandle> {
    let mut handle = match cfg.name.as_str() {
        "synthetic" => synthetic::generate(&synthetic::SyntheticConfig {
            n_train: cfg.n_train,
            n_eval: cfg.n_eval,
            image_size: cfg.image_size,
            seed: cfg.seed,
        })?,
        "cifar10" => {
            let root = cfg
                .root
                .clone()
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                .ok_or_else(|| Error::config(format!("cifar10 needs dataset.root or {DATA_ROOT_ENV}")))?;
            cifar::load(&root)?
        }
        other => return Err(Error::config(format!("unknown dataset {other:?}"))),
    };
    if cfg.train_limit > 0 {
        handle.train.truncate(cfg.train_limit);
    }
    if cfg.eval_limit > 0 {
        handle.eval.truncate(cfg.eval_limit);
    }
    handle.validate()?;
    Ok(handle)
}
