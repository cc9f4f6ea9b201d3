//! Fourier statistics of perturbations.

use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Sample frequencies in cycles per pixel, numpy `fftfreq` order.
pub fn fftfreq(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            k / n as f64
        })
        .collect()
}

/// In-place unnormalized 2-D FFT of a row-major `h x w` grid.
pub fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            buf[i] = data[i * w + j];
        }
        col.process(&mut buf);
        for i in 0..h {
            data[i * w + j] = buf[i];
        }
    }
}

/// Averaged spectra of a set of `H x W x C` perturbations, DC at
/// `(H/2, W/2)` (integer division).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// Mean magnitude `|F|` over samples and channels.
    pub heatmap: Array2<f64>,
    /// `ln(1 + heatmap)`.
    pub log_heatmap: Array2<f64>,
    /// Mean power `|F|^2` over samples and channels.
    pub power: Array2<f64>,
    /// Share of `power` inside the centered square covering a quarter of the frequency plane.
    pub low_freq_energy_fraction: f64,
    /// Mean over samples of `sum |F|^2 / (H W)`.
    pub spectral_energy: f64,
    /// Mean over samples of `sum x^2`; equals `spectral_energy` by Parseval.
    pub spatial_energy: f64,
}

fn shift(i: usize, n: usize) -> usize {
    (i + n / 2) % n
}

pub fn spectral_report(perturbations: &[Array3<f64>]) -> Result<SpectralReport> {
    let first = perturbations
        .first()
        .ok_or_else(|| Error::config("spectral report needs at least one perturbation"))?;
    let (h, w, c) = first.dim();
    let mut mag = Array2::<f64>::zeros((h, w));
    let mut power = Array2::<f64>::zeros((h, w));
    let (mut spectral, mut spatial) = (0.0, 0.0);
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    for p in perturbations {
        if p.dim() != (h, w, c) {
            return Err(Error::shape(format!("perturbation {:?} differs from {:?}", p.dim(), (h, w, c))));
        }
        spatial += p.iter().map(|v| v * v).sum::<f64>();
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    buf[i * w + j] = Complex::new(p[[i, j, ch]], 0.0);
                }
            }
            fft2(&mut buf, h, w, false);
            for i in 0..h {
                for j in 0..w {
                    let f = buf[i * w + j];
                    let (si, sj) = (shift(i, h), shift(j, w));
                    mag[[si, sj]] += f.norm();
                    power[[si, sj]] += f.norm_sqr();
                    spectral += f.norm_sqr();
                }
            }
        }
    }
    let n = perturbations.len() as f64;
    let samples = n * c as f64;
    mag /= samples;
    power /= samples;
    let total: f64 = power.sum();
    let (hh, hw) = (h / 2, w / 2);
    let (r0, c0) = (h / 2 - hh / 2, w / 2 - hw / 2);
    let inner: f64 = power.slice(ndarray::s![r0..r0 + hh, c0..c0 + hw]).sum();
    Ok(SpectralReport {
        log_heatmap: mag.mapv(f64::ln_1p),
        heatmap: mag,
        power,
        low_freq_energy_fraction: if total > 0.0 { inner / total } else { 0.0 },
        spectral_energy: spectral / (h * w) as f64 / n,
        spatial_energy: spatial / n,
    })
}
