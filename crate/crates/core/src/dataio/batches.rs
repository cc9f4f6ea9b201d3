//! Deterministic batching: the training order of epoch `e` is a permutation
//! derived from `(seed, e)`; a partial final batch is dropped in training and
//! kept in evaluation.

use std::ops::Range;

use rand::seq::SliceRandom;

use crate::batch::ImageBatch;
use crate::dataio::{DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(seed, &[tags::EPOCH, epoch]));
    order
}

/// Dataset indices of training step `step` (global, across epochs).
pub fn train_batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || n < batch_size {
        return Err(Error::config(format!(
            "batch size {batch_size} does not fit a training split of {n}"
        )));
    }
    let per_epoch = (n / batch_size) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let order = epoch_order(n, seed, epoch);
    Ok(order[k * batch_size..(k + 1) * batch_size].to_vec())
}

/// Contiguous evaluation ranges, last one possibly short.
pub fn eval_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect()
}

/// One epoch of batches. Training batches are shuffled and full-sized;
/// evaluation batches are in order and cover every example.
pub fn batches<'a>(
    data: &'a DatasetHandle,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Box<dyn Iterator<Item = ImageBatch<f32>> + 'a>> {
    let s = data.split(split);
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    match split {
        Split::Train => {
            let order = epoch_order(s.len(), seed, epoch);
            let full = s.len() / batch_size;
            Ok(Box::new(
                (0..full).map(move |k| s.gather(&order[k * batch_size..(k + 1) * batch_size])),
            ))
        }
        Split::Eval => Ok(Box::new(
            eval_ranges(s.len(), batch_size)
                .into_iter()
                .map(move |r| s.gather(&r.collect::<Vec<_>>())),
        )),
    }
}
