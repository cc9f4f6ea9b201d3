//! Procedural two-class set: filled squares (label 0) and filled discs
//! (label 1), brighter than a textured background. Square and disc areas are drawn
//! from overlapping ranges so area alone does not separate the classes.

use ndarray::Array4;
use rand::Rng;

use crate::dataio::{DatasetHandle, SplitData};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub image_size: usize,
    pub seed: u64,
}

const TEXTURE: f32 = 0.05;

fn render(size: usize, label: usize, seed: u64, id: usize, out: &mut [f32]) {
    let mut r = rng::rng_for(seed, &[tags::SYNTHETIC, id as u64]);
    let s = size as f32;
    let bg: f32 = r.random_range(0.05..0.35);
    let fg = bg + r.random_range(0.45..0.6);
    let tint: [f32; 3] = [r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), r.random_range(-0.05..0.05)];
    let cy = r.random_range(0.4 * s..0.6 * s);
    let cx = r.random_range(0.4 * s..0.6 * s);
    let half_side = r.random_range(0.5 * s..0.7 * s) / 2.0;
    let radius = r.random_range(0.3 * s..0.42 * s);
    for i in 0..size {
        for j in 0..size {
            let (py, px) = (i as f32 + 0.5, j as f32 + 0.5);
            let inside = if label == 0 {
                (py - cy).abs() <= half_side && (px - cx).abs() <= half_side
            } else {
                (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius
            };
            let base = if inside { fg } else { bg };
            for (c, t) in tint.iter().enumerate() {
                let noise: f32 = r.random_range(-TEXTURE..TEXTURE);
                out[(i * size + j) * 3 + c] = (base + t + noise).clamp(0.0, 1.0);
            }
        }
    }
}

fn split(size: usize, seed: u64, ids: std::ops::Range<usize>) -> SplitData {
    let n = ids.len();
    let mut pixels = Array4::<f32>::zeros((n, size, size, 3));
    let ids: Vec<usize> = ids.collect();
    let labels: Vec<usize> = ids.iter().map(|id| id % 2).collect();
    for ((img, &id), &label) in pixels.outer_iter_mut().zip(&ids).zip(&labels) {
        let mut img = img;
        render(size, label, seed, id, img.as_slice_mut().expect("contiguous image"));
    }
    SplitData { pixels, labels, ids }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<DatasetHandle> {
    if cfg.image_size < 4 || cfg.n_train == 0 || cfg.n_eval == 0 {
        return Err(Error::config(format!("invalid synthetic dataset config {cfg:?}")));
    }
    Ok(DatasetHandle {
        name: "synthetic".into(),
        n_classes: 2,
        image_size: cfg.image_size,
        channels: 3,
        source: None,
        train: split(cfg.image_size, cfg.seed, 0..cfg.n_train),
        eval: split(cfg.image_size, cfg.seed, cfg.n_train..cfg.n_train + cfg.n_eval),
    })
}
