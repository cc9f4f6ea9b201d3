//! Multi-scale perturbation pyramids.
//!
//! A pyramid holds one parameter grid per scale. The grid for scale `s` has
//! one entry per `s x s` pixel cell and per channel; expanding the pyramid
//! block-replicates every grid to image resolution, clips each grid to its
//! own L-infinity budget, scales it by its multiplier and sums the levels.
//! Cells on the bottom and right edges cover whatever remains when `s` does
//! not divide the image side, so a level has `ceil(H/s) x ceil(W/s)` cells.

use ndarray::{Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// Which labels the attack optimizes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Minimize cross-entropy toward a random wrong label.
    RandomTarget,
    /// Maximize cross-entropy of the true label.
    Untargeted,
}

/// Whether the pyramid is optimized or drawn at random.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomMode {
    Adversarial,
    /// Full-budget sign noise, no optimization.
    RandomSign,
}

/// Attack configuration: scales (coarsest first), per-level multipliers and
/// budgets, and the PGD schedule. Budgets and step sizes are in image units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidSpec {
    pub scales: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub eps: Vec<f64>,
    pub step_size: f64,
    pub n_steps: usize,
    pub target_mode: TargetMode,
    pub random_mode: RandomMode,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl PyramidSpec {
    /// Three-level pyramid for 224 x 224 inputs: scales 32/16/1, multipliers
    /// 20/10/1, budget 6/255 per level, five steps of 1/255.
    pub fn imagenet_default() -> Self {
        Self::uniform_eps(vec![32, 16, 1], vec![20.0, 10.0, 1.0], 6.0 / 255.0)
    }

    /// Patch-aligned analog for 32 x 32 inputs with 4-pixel patches:
    /// 2 x 2 patches, one patch, one pixel.
    pub fn desk_default() -> Self {
        Self::uniform_eps(vec![8, 4, 1], vec![20.0, 10.0, 1.0], 6.0 / 255.0)
    }

    /// Single per-pixel level with multiplier one.
    pub fn pixel(eps: f64, step_size: f64, n_steps: usize) -> Self {
        Self {
            scales: vec![1],
            multipliers: vec![1.0],
            eps: vec![eps],
            step_size,
            n_steps,
            target_mode: TargetMode::RandomTarget,
            random_mode: RandomMode::Adversarial,
        }
    }

    fn uniform_eps(scales: Vec<usize>, multipliers: Vec<f64>, eps: f64) -> Self {
        let n = scales.len();
        Self {
            scales,
            multipliers,
            eps: vec![eps; n],
            step_size: 1.0 / 255.0,
            n_steps: 5,
            target_mode: TargetMode::RandomTarget,
            random_mode: RandomMode::Adversarial,
        }
    }

    pub fn levels(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scales.len();
        if n == 0 {
            return Err(Error::config("pyramid needs at least one scale"));
        }
        if self.multipliers.len() != n || self.eps.len() != n {
            return Err(Error::config(format!(
                "pyramid has {n} scales, {} multipliers and {} budgets",
                self.multipliers.len(),
                self.eps.len()
            )));
        }
        if self.scales.contains(&0) {
            return Err(Error::config("pyramid scales must be positive"));
        }
        if let Some(m) = self.multipliers.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::config(format!("multiplier {m} must be positive")));
        }
        if let Some(e) = self.eps.iter().find(|e| e.is_nan() || **e < 0.0) {
            return Err(Error::config(format!("budget {e} must be nonnegative")));
        }
        if self.n_steps > 0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config(format!(
                "step size {} must be positive when n_steps > 0",
                self.step_size
            )));
        }
        Ok(())
    }

    /// Upper bound on the per-pixel magnitude of an expanded pyramid.
    pub fn max_pixel_change(&self) -> f64 {
        self.multipliers
            .iter()
            .zip(&self.eps)
            .map(|(m, e)| m * e)
            .sum()
    }
}

/// Per-scale perturbation grids, each `B x ceil(H/s) x ceil(W/s) x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPyramid<T> {
    pub levels: Vec<Array4<T>>,
}

impl<T: Scalar> PerturbationPyramid<T> {
    pub fn max_abs(&self, level: usize) -> T {
        self.levels[level]
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.iter().all(|v| *v == T::zero()))
    }
}

/// Grid extent for one scale.
pub fn level_dims(shape: ImageShape, scale: usize) -> (usize, usize, usize, usize) {
    (
        shape.batch,
        shape.height.div_ceil(scale),
        shape.width.div_ceil(scale),
        shape.channels,
    )
}

fn check_matches<T>(pyr: &PerturbationPyramid<T>, spec: &PyramidSpec, shape: ImageShape) -> Result<()> {
    if pyr.levels.len() != spec.levels() {
        return Err(Error::shape(format!(
            "pyramid has {} levels, spec has {}",
            pyr.levels.len(),
            spec.levels()
        )));
    }
    for (i, (level, &s)) in pyr.levels.iter().zip(&spec.scales).enumerate() {
        let expected = level_dims(shape, s);
        if level.dim() != expected {
            return Err(Error::shape(format!(
                "level {i} (scale {s}) has shape {:?}, expected {expected:?}",
                level.dim()
            )));
        }
    }
    Ok(())
}

/// All-zero pyramid for the given image shape.
pub fn init_pyramid<T: Scalar>(spec: &PyramidSpec, shape: ImageShape) -> Result<PerturbationPyramid<T>> {
    spec.validate()?;
    shape.validate()?;
    Ok(PerturbationPyramid {
        levels: spec
            .scales
            .iter()
            .map(|&s| Array4::zeros(level_dims(shape, s)))
            .collect(),
    })
}

/// Sum over levels of `m_s * clip(delta_s, eps_s)`, nearest-neighbor
/// upsampled to `shape`.
pub fn expand_pyramid<T: Scalar>(
    pyr: &PerturbationPyramid<T>,
    spec: &PyramidSpec,
    shape: ImageShape,
) -> Result<Array4<T>> {
    check_matches(pyr, spec, shape)?;
    let (b, h, w, c) = shape.dims();
    let mut out = Array4::<T>::zeros((b, h, w, c));
    for ((level, &s), (&m, &eps)) in pyr
        .levels
        .iter()
        .zip(&spec.scales)
        .zip(spec.multipliers.iter().zip(&spec.eps))
    {
        let m = T::of(m);
        let eps = T::of(eps);
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let d = level[[n, i / s, j / s, ch]];
                        out[[n, i, j, ch]] += m * d.max(-eps).min(eps);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Contribution of level `level` alone: `m_s * clip(delta_s, eps_s)` upsampled.
pub fn expand_level<T: Scalar>(
    pyr: &PerturbationPyramid<T>,
    spec: &PyramidSpec,
    shape: ImageShape,
    level: usize,
) -> Result<Array4<T>> {
    check_matches(pyr, spec, shape)?;
    if level >= spec.levels() {
        return Err(Error::shape(format!("level {level} of a {}-level pyramid", spec.levels())));
    }
    let single = PyramidSpec {
        scales: vec![spec.scales[level]],
        multipliers: vec![spec.multipliers[level]],
        eps: vec![spec.eps[level]],
        ..spec.clone()
    };
    let levels = vec![pyr.levels[level].clone()];
    expand_pyramid(&PerturbationPyramid { levels }, &single, shape)
}

/// `x + expansion` without the final range clip; this is the attack's
/// forward input.
pub fn perturb_unclipped<T: Scalar>(
    pixels: &Array4<T>,
    pyr: &PerturbationPyramid<T>,
    spec: &PyramidSpec,
) -> Result<Array4<T>> {
    let shape = ImageShape::of(pixels);
    Ok(expand_pyramid(pyr, spec, shape)? + pixels)
}

/// `clip(x + expansion, 0, 1)`; labels are carried over.
pub fn apply_pyramid<T: Scalar>(
    batch: &ImageBatch<T>,
    pyr: &PerturbationPyramid<T>,
    spec: &PyramidSpec,
) -> Result<ImageBatch<T>> {
    let mut pixels = perturb_unclipped(&batch.pixels, pyr, spec)?;
    pixels.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
    Ok(ImageBatch {
        pixels,
        labels: batch.labels.clone(),
    })
}

/// Clamps each level to `[-eps_s, eps_s]`.
pub fn project_pyramid<T: Scalar>(pyr: &PerturbationPyramid<T>, spec: &PyramidSpec) -> PerturbationPyramid<T> {
    let mut out = pyr.clone();
    project_in_place(&mut out, spec);
    out
}

/// In-place projection; returns how many entries were moved.
pub fn project_in_place<T: Scalar>(pyr: &mut PerturbationPyramid<T>, spec: &PyramidSpec) -> usize {
    let mut moved = 0;
    for (level, &eps) in pyr.levels.iter_mut().zip(&spec.eps) {
        let eps = T::of(eps);
        for v in level.iter_mut() {
            let clamped = v.max(-eps).min(eps);
            if clamped != *v {
                moved += 1;
                *v = clamped;
            }
        }
    }
    moved
}

/// Chain rule from a pixel-space gradient to every level: each cell receives
/// `m_s` times the sum of the pixel gradients it covers, or zero where the
/// entry lies strictly outside its budget.
pub fn pyramid_gradient<T: Scalar>(
    pyr: &PerturbationPyramid<T>,
    spec: &PyramidSpec,
    pixel_grad: &Array4<T>,
) -> Result<PerturbationPyramid<T>> {
    let shape = ImageShape::of(pixel_grad);
    check_matches(pyr, spec, shape)?;
    let (b, h, w, c) = shape.dims();
    let mut levels = Vec::with_capacity(pyr.levels.len());
    for ((level, &s), (&m, &eps)) in pyr
        .levels
        .iter()
        .zip(&spec.scales)
        .zip(spec.multipliers.iter().zip(&spec.eps))
    {
        let mut g = Array4::<T>::zeros(level.dim());
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        g[[n, i / s, j / s, ch]] += pixel_grad[[n, i, j, ch]];
                    }
                }
            }
        }
        let m = T::of(m);
        let eps = T::of(eps);
        Zip::from(&mut g).and(level).for_each(|g, &d| {
            *g = if d.abs() <= eps { *g * m } else { T::zero() };
        });
        levels.push(g);
    }
    Ok(PerturbationPyramid { levels })
}

/// One random wrong label per example, uniform over the other classes.
pub fn select_targets(labels: &[usize], n_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if n_classes < 2 {
        return Err(Error::config(format!(
            "random targets need at least 2 classes, got {n_classes}"
        )));
    }
    let mut rng = rng::rng_for(seed, &[tags::TARGET]);
    labels
        .iter()
        .map(|&y| {
            if y >= n_classes {
                return Err(Error::config(format!(
                    "label {y} out of range for {n_classes} classes"
                )));
            }
            let k = rng.random_range(0..n_classes - 1);
            Ok(if k >= y { k + 1 } else { k })
        })
        .collect()
}

/// Sign noise at full budget: every entry is `+eps_s` or `-eps_s`.
pub fn random_perturbation<T: Scalar>(
    spec: &PyramidSpec,
    shape: ImageShape,
    seed: u64,
) -> Result<PerturbationPyramid<T>> {
    let mut pyr = init_pyramid::<T>(spec, shape)?;
    for (i, (level, &eps)) in pyr.levels.iter_mut().zip(&spec.eps).enumerate() {
        let mut rng = rng::rng_for(seed, &[tags::RANDOM_PERTURBATION, i as u64]);
        let eps = T::of(eps);
        level.mapv_inplace(|_| if rng.random::<bool>() { eps } else { -eps });
    }
    Ok(pyr)
}
