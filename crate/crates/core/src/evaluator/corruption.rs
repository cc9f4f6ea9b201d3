//! Synthetic corruption suite: four kinds at five severities.
//!
//! Severity parameters (table version 1):
//!
//! | kind | parameter | 1 | 2 | 3 | 4 | 5 |
//! |---|---|---|---|---|---|---|
//! | `gaussian_noise` | noise std | 0.04 | 0.06 | 0.08 | 0.10 | 0.12 |
//! | `gaussian_blur` | kernel std (px) | 0.5 | 0.75 | 1.0 | 1.25 | 1.5 |
//! | `contrast` | contrast factor | 0.75 | 0.6 | 0.45 | 0.3 | 0.15 |
//! | `jpeg_blockiness_proxy` | blend toward 4x4 block mean | 0.2 | 0.4 | 0.6 | 0.8 | 1.0 |

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::Differentiable;
use crate::batch::ImageBatch;
use crate::dataio::SplitData;
use crate::error::{Error, Result};
use crate::evaluator::accumulate;
use crate::rng::{self, tags};

pub const CORRUPTION_TABLE_VERSION: u32 = 1;

const NOISE_STD: [f64; 5] = [0.04, 0.06, 0.08, 0.10, 0.12];
const BLUR_STD: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
const CONTRAST: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];
const BLOCK_BLEND: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
const BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Contrast,
    JpegBlockinessProxy,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::JpegBlockinessProxy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::JpegBlockinessProxy => "jpeg_blockiness_proxy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 to 5.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config(format!("corruption severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    /// Value from the severity table.
    pub fn parameter(&self) -> f64 {
        let i = self.severity as usize - 1;
        match self.kind {
            CorruptionKind::GaussianNoise => NOISE_STD[i],
            CorruptionKind::GaussianBlur => BLUR_STD[i],
            CorruptionKind::Contrast => CONTRAST[i],
            CorruptionKind::JpegBlockinessProxy => BLOCK_BLEND[i],
        }
    }
}

/// Every kind at every severity.
pub fn full_suite() -> Vec<CorruptionSpec> {
    CorruptionKind::ALL
        .iter()
        .flat_map(|&kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity }))
        .collect()
}

fn blur_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with clamped edges, written as `x + sum w (x_k - x)` so a
/// constant image is reproduced exactly.
fn blur(img: &mut ndarray::ArrayViewMut3<f32>, sigma: f64) {
    let k = blur_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.dim();
    for axis in 0..2 {
        let src = img.to_owned();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let center = src[[i, j, ch]] as f64;
                    let mut acc = 0.0;
                    for (t, wt) in k.iter().enumerate() {
                        let d = t as isize - r;
                        let (ii, jj) = if axis == 0 {
                            ((i as isize + d).clamp(0, h as isize - 1) as usize, j)
                        } else {
                            (i, (j as isize + d).clamp(0, w as isize - 1) as usize)
                        };
                        acc += wt * (src[[ii, jj, ch]] as f64 - center);
                    }
                    img[[i, j, ch]] = (center + acc) as f32;
                }
            }
        }
    }
}

fn block_blend(img: &mut ndarray::ArrayViewMut3<f32>, a: f64) {
    let (h, w, c) = img.dim();
    for bi in (0..h).step_by(BLOCK) {
        for bj in (0..w).step_by(BLOCK) {
            let (ei, ej) = ((bi + BLOCK).min(h), (bj + BLOCK).min(w));
            for ch in 0..c {
                let mut sum = 0.0f64;
                for i in bi..ei {
                    for j in bj..ej {
                        sum += img[[i, j, ch]] as f64;
                    }
                }
                let mean = sum / ((ei - bi) * (ej - bj)) as f64;
                for i in bi..ei {
                    for j in bj..ej {
                        let v = img[[i, j, ch]] as f64;
                        img[[i, j, ch]] = ((1.0 - a) * v + a * mean) as f32;
                    }
                }
            }
        }
    }
}

/// [`corrupt_indexed`] with the batch starting at example 0.
pub fn corrupt(batch: &ImageBatch<f32>, spec: CorruptionSpec, seed: u64) -> Result<ImageBatch<f32>> {
    corrupt_indexed(batch, spec, seed, 0)
}

/// Applies `spec` to every image. Noise for the image at position `k` is
/// keyed by `(seed, first_index + k)`, so a split corrupts identically under
/// any batching. Output is clipped to `[0, 1]`.
pub fn corrupt_indexed(
    batch: &ImageBatch<f32>,
    spec: CorruptionSpec,
    seed: u64,
    first_index: usize,
) -> Result<ImageBatch<f32>> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    let p = spec.parameter();
    let mut out: Array4<f32> = batch.pixels.clone();
    for (k, mut img) in out.axis_iter_mut(Axis(0)).enumerate() {
        match spec.kind {
            CorruptionKind::GaussianNoise => {
                let normal = Normal::new(0.0, p).expect("positive std");
                let mut r = rng::rng_for(seed, &[tags::CORRUPT, (first_index + k) as u64]);
                img.iter_mut().for_each(|v| *v += normal.sample(&mut r) as f32);
            }
            CorruptionKind::GaussianBlur => blur(&mut img, p),
            CorruptionKind::Contrast => {
                let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
                img.mapv_inplace(|v| ((v as f64 - mean) * p + mean) as f32);
            }
            CorruptionKind::JpegBlockinessProxy => block_blend(&mut img, p),
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(ImageBatch {
        pixels: out,
        labels: batch.labels.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub accuracy: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionTable {
    pub rows: Vec<CorruptionRow>,
}

impl CorruptionTable {
    pub const CSV_HEADER: &'static str = "kind,severity,accuracy,error";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.kind.name(), r.severity, r.accuracy, r.error));
        }
        s
    }

    fn error_sums(&self) -> BTreeMap<CorruptionKind, f64> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry(r.kind).or_insert(0.0) += r.error;
        }
        m
    }

    /// Mean over kinds of `sum_severity error / sum_severity reference error`.
    /// `None` when no kind is shared or the reference makes no error on one.
    pub fn mce(&self, reference: &CorruptionTable) -> Option<f64> {
        let ours = self.error_sums();
        let theirs = reference.error_sums();
        let mut ratios = Vec::new();
        for (kind, e) in &ours {
            let r = *theirs.get(kind)?;
            if r == 0.0 {
                return None;
            }
            ratios.push(e / r);
        }
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }

    /// Mean accuracy over all rows.
    pub fn mean_accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len() as f64
    }
}

pub fn evaluate_corruption_suite<M: Differentiable<f32> + ?Sized>(
    model: &M,
    split: &SplitData,
    specs: &[CorruptionSpec],
    seed: u64,
    batch_size: usize,
) -> Result<CorruptionTable> {
    let mut rows = Vec::with_capacity(specs.len());
    for &spec in specs {
        let acc = accumulate(model, split, batch_size, |start, b| corrupt_indexed(&b, spec, seed, start))?;
        rows.push(CorruptionRow {
            kind: spec.kind,
            severity: spec.severity,
            accuracy: acc.fraction(),
            error: 1.0 - acc.fraction(),
        });
    }
    Ok(CorruptionTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> ImageBatch<f32> {
        let px = Array4::from_shape_fn((2, 8, 8, 3), |(n, i, j, c)| ((n + i * 3 + j * 5 + c) % 11) as f32 / 10.0);
        ImageBatch::new(px, vec![0, 1]).unwrap()
    }

    #[test]
    fn blur_keeps_constant_image() {
        let px = Array4::from_elem((1, 8, 8, 3), 0.37f32);
        let b = ImageBatch::new(px, vec![0]).unwrap();
        for s in 1..=5 {
            let out = corrupt(&b, CorruptionSpec::new(CorruptionKind::GaussianBlur, s).unwrap(), 0).unwrap();
            assert_eq!(out, b);
        }
    }

    #[test]
    fn distortion_grows_with_severity() {
        let b = batch();
        for kind in CorruptionKind::ALL {
            let mut last = 0.0;
            for s in 1..=5 {
                let out = corrupt(&b, CorruptionSpec::new(kind, s).unwrap(), 3).unwrap();
                assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
                let d: f64 = (&out.pixels - &b.pixels).iter().map(|v| (*v as f64).powi(2)).sum();
                assert!(d >= last, "{kind:?} severity {s}");
                last = d;
            }
        }
    }

    #[test]
    fn seeded_and_batch_independent() {
        let b = batch();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap();
        assert_eq!(corrupt(&b, spec, 1).unwrap(), corrupt(&b, spec, 1).unwrap());
        let whole = corrupt(&b, spec, 1).unwrap();
        let second = ImageBatch {
            pixels: b.pixels.slice_axis(Axis(0), (1..2).into()).to_owned(),
            labels: vec![1],
        };
        let part = corrupt_indexed(&second, spec, 1, 1).unwrap();
        assert_eq!(part.pixels, whole.pixels.slice_axis(Axis(0), (1..2).into()));
    }

    #[test]
    fn severity_range_checked() {
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
        assert_eq!(full_suite().len(), 20);
    }

    #[test]
    fn mce_definition() {
        let t = CorruptionTable {
            rows: vec![
                CorruptionRow { kind: CorruptionKind::Contrast, severity: 1, accuracy: 0.7, error: 0.3 },
                CorruptionRow { kind: CorruptionKind::GaussianNoise, severity: 1, accuracy: 0.6, error: 0.4 },
            ],
        };
        assert_eq!(t.mce(&t), Some(1.0));
        let mut better = t.clone();
        better.rows.iter_mut().for_each(|r| r.error /= 2.0);
        assert!(better.mce(&t).unwrap() < 1.0);
    }
}
