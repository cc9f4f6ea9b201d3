//! Robustness evaluation. Every routine runs with dropout and stochastic
//! depth disabled, never mutates the model, and counts correct predictions
//! in integers so results do not depend on the batch size.

mod corruption;
mod noise;
mod spectral;
mod whitebox;

use crate::attack::Differentiable;
use crate::backbone::{count_correct, DropRealization};
use crate::dataio::{eval_ranges, SplitData};
use crate::error::Result;

pub use corruption::{
    corrupt, corrupt_indexed, evaluate_corruption_suite, full_suite, CorruptionKind, CorruptionRow, CorruptionSpec,
    CorruptionTable, CORRUPTION_TABLE_VERSION,
};
pub use noise::{band_limited_noise, noise_robustness_curve, Band, BandKind, CurvePoint};
pub use spectral::{fft2, fftfreq, spectral_report, SpectralReport};
pub use whitebox::{default_whitebox_attacks, whitebox_eval, WhiteboxRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, other: Accuracy) {
        self.correct += other.correct;
        self.total += other.total;
    }
}

/// Accumulates `predict(f(batch))` over the split in evaluation order.
pub(crate) fn accumulate<M, F>(model: &M, split: &SplitData, batch_size: usize, mut transform: F) -> Result<Accuracy>
where
    M: Differentiable<f32> + ?Sized,
    F: FnMut(usize, crate::batch::ImageBatch<f32>) -> Result<crate::batch::ImageBatch<f32>>,
{
    let mut acc = Accuracy::default();
    for range in eval_ranges(split.len(), batch_size) {
        let start = range.start;
        let batch = transform(start, split.gather(&range.collect::<Vec<_>>()))?;
        let logits = model.logits(&batch.pixels, &DropRealization::disabled())?;
        acc.add(Accuracy {
            correct: count_correct(&logits, &batch.labels),
            total: batch.len(),
        });
    }
    Ok(acc)
}

/// Top-1 accuracy; ties in the logits resolve to the lowest class index.
pub fn evaluate_clean<M: Differentiable<f32> + ?Sized>(
    model: &M,
    split: &SplitData,
    batch_size: usize,
) -> Result<Accuracy> {
    accumulate(model, split, batch_size, |_, b| Ok(b))
}
