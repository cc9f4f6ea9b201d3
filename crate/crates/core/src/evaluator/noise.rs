//! Band-limited Gaussian noise and accuracy-vs-cutoff curves.

use ndarray::Array4;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::attack::Differentiable;
use crate::batch::{ImageBatch, ImageShape};
use crate::dataio::SplitData;
use crate::error::{Error, Result};
use crate::evaluator::spectral::{fft2, fftfreq};
use crate::evaluator::accumulate;
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    /// Keeps radial frequencies `r <= cutoff`.
    LowPass,
    /// Keeps radial frequencies `r > cutoff`.
    HighPass,
}

impl BandKind {
    pub fn name(&self) -> &'static str {
        match self {
            BandKind::LowPass => "low_pass",
            BandKind::HighPass => "high_pass",
        }
    }
}

/// Ideal radial mask; `cutoff` in cycles per pixel (Euclidean radius, so the
/// corner frequency is `sqrt(2) / 2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub kind: BandKind,
    pub cutoff: f64,
}

impl Band {
    fn keeps(&self, fy: f64, fx: f64) -> bool {
        let r = (fy * fy + fx * fx).sqrt();
        match self.kind {
            BandKind::LowPass => r <= self.cutoff,
            BandKind::HighPass => r > self.cutoff,
        }
    }
}

/// Filters white Gaussian noise for one image (all channels) and rescales it
/// to L2 norm `l2_norm`.
fn filtered_image(h: usize, w: usize, c: usize, band: Band, l2_norm: f64, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::rng_for(seed, &[]);
    let white: Vec<f64> = (0..h * w * c).map(|_| StandardNormal.sample(&mut r)).collect();
    if l2_norm == 0.0 {
        return Ok(vec![0.0; h * w * c]);
    }
    let (fy, fx) = (fftfreq(h), fftfreq(w));
    let mut out = vec![0.0; h * w * c];
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for p in 0..h * w {
            buf[p] = Complex::new(white[p * c + ch], 0.0);
        }
        fft2(&mut buf, h, w, false);
        for i in 0..h {
            for j in 0..w {
                if !band.keeps(fy[i], fx[j]) {
                    buf[i * w + j] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut buf, h, w, true);
        for p in 0..h * w {
            out[p * c + ch] = buf[p].re;
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::config(format!("band {band:?} removes every frequency of a {h}x{w} image")));
    }
    let scale = l2_norm / norm;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// One noise image per batch entry; entry `k` is keyed by `(seed, k)` and has
/// L2 norm `l2_norm`.
pub fn band_limited_noise(shape: ImageShape, band: Band, l2_norm: f64, seed: u64) -> Result<Array4<f64>> {
    shape.validate()?;
    if !(l2_norm.is_finite() && l2_norm >= 0.0) {
        return Err(Error::config(format!("l2_norm {l2_norm} must be nonnegative")));
    }
    let (b, h, w, c) = shape.dims();
    let mut data = Vec::with_capacity(b * h * w * c);
    for k in 0..b {
        data.extend(filtered_image(h, w, c, band, l2_norm, rng::derive(seed, &[tags::BAND_NOISE, k as u64]))?);
    }
    Ok(Array4::from_shape_vec((b, h, w, c), data).expect("noise layout"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub band: BandKind,
    pub cutoff: f64,
    pub accuracy: f64,
}

impl CurvePoint {
    pub const CSV_HEADER: &'static str = "band,cutoff,accuracy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.band.name(), self.cutoff, self.accuracy)
    }
}

/// Accuracy on `clip(x + noise)` for each cutoff. Example `i` of the split
/// starts from the same white noise at every cutoff.
pub fn noise_robustness_curve<M: Differentiable<f32> + ?Sized>(
    model: &M,
    split: &SplitData,
    kind: BandKind,
    cutoffs: &[f64],
    l2_norm: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::with_capacity(cutoffs.len());
    for &cutoff in cutoffs {
        let band = Band { kind, cutoff };
        let acc = accumulate(model, split, batch_size, |start, b| {
            let (n, h, w, c) = b.pixels.dim();
            let mut pixels = b.pixels;
            for k in 0..n {
                let noise = filtered_image(
                    h,
                    w,
                    c,
                    band,
                    l2_norm,
                    rng::derive(seed, &[tags::BAND_NOISE, (start + k) as u64]),
                )?;
                let mut img = pixels.index_axis_mut(ndarray::Axis(0), k);
                for (v, e) in img.iter_mut().zip(noise) {
                    *v = (*v + e as f32).clamp(0.0, 1.0);
                }
            }
            Ok(ImageBatch { pixels, labels: b.labels })
        })?;
        points.push(CurvePoint {
            band: kind,
            cutoff,
            accuracy: acc.fraction(),
        });
    }
    Ok(points)
}
