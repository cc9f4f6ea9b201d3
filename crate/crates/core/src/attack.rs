//! Signed-gradient PGD over perturbation pyramids.
//!
//! Each step evaluates the attack loss on `x + expand(delta)` without the
//! final `[0, 1]` clip, moves every level by `step_size * sign(grad)`, and
//! projects each level back into its budget. The range clip is only applied
//! when the perturbed batch is materialized.

use ndarray::{Array2, Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, DropRealization, GradRequest, ModelParams};
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::pyramid::{
    apply_pyramid, init_pyramid, perturb_unclipped, project_in_place, pyramid_gradient, random_perturbation,
    select_targets, PerturbationPyramid, PyramidSpec, RandomMode, TargetMode,
};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// A classifier that can report its mean cross-entropy and the gradient of
/// that loss with respect to the input pixels.
pub trait Differentiable<T: Scalar> {
    fn n_classes(&self) -> usize;

    fn logits(&self, pixels: &Array4<T>, drop: &DropRealization) -> Result<Array2<T>>;

    fn loss_and_input_grad(
        &self,
        pixels: &Array4<T>,
        labels: &[usize],
        drop: &DropRealization,
    ) -> Result<(T, Array4<T>)>;

    fn loss(&self, pixels: &Array4<T>, labels: &[usize], drop: &DropRealization) -> Result<T> {
        let logits = self.logits(pixels, drop)?;
        Ok(backbone::softmax_cross_entropy(&logits, labels)?.0)
    }
}

impl<T: Scalar> Differentiable<T> for ModelParams<T> {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn logits(&self, pixels: &Array4<T>, drop: &DropRealization) -> Result<Array2<T>> {
        backbone::forward(self, pixels, drop)
    }

    fn loss_and_input_grad(
        &self,
        pixels: &Array4<T>,
        labels: &[usize],
        drop: &DropRealization,
    ) -> Result<(T, Array4<T>)> {
        let eval = backbone::loss_and_grads(self, pixels, labels, drop, GradRequest::INPUT)?;
        Ok((eval.loss, eval.grads.input.expect("input gradient requested")))
    }
}

/// Per-pixel attack settings; becomes a one-level pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelSpec {
    pub eps: f64,
    pub step_size: f64,
    pub n_steps: usize,
    pub target_mode: TargetMode,
}

impl Default for PixelSpec {
    /// Budget 4/255, five steps of 1/255, random target.
    fn default() -> Self {
        Self {
            eps: 4.0 / 255.0,
            step_size: 1.0 / 255.0,
            n_steps: 5,
            target_mode: TargetMode::RandomTarget,
        }
    }
}

impl PixelSpec {
    pub fn to_pyramid(&self) -> PyramidSpec {
        PyramidSpec {
            target_mode: self.target_mode,
            ..PyramidSpec::pixel(self.eps, self.step_size, self.n_steps)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T> {
    pub perturbed: ImageBatch<T>,
    pub pyramid: PerturbationPyramid<T>,
    /// Attack loss before each step plus the final loss (`n_steps + 1` entries).
    /// Random-sign mode reports the loss before and after the draw.
    pub per_step_loss: Vec<T>,
    pub target_labels: Vec<usize>,
    /// Entries moved by projection over the whole run.
    pub projected_entries: usize,
}

/// Called after every PGD step with the step index and the projected pyramid.
pub type StepObserver<'a, T> = dyn FnMut(usize, &PerturbationPyramid<T>) + 'a;

pub fn pgd_pyramid_attack<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    drop: &DropRealization,
    batch: &ImageBatch<T>,
    spec: &PyramidSpec,
    seed: u64,
) -> Result<AttackResult<T>> {
    pgd_pyramid_attack_observed(model, drop, batch, spec, seed, &mut |_, _| {})
}

/// Pixel attack: identical to the pyramid attack with one scale-1 level.
pub fn pgd_pixel_attack<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    drop: &DropRealization,
    batch: &ImageBatch<T>,
    pixel: &PixelSpec,
    seed: u64,
) -> Result<AttackResult<T>> {
    pgd_pyramid_attack(model, drop, batch, &pixel.to_pyramid(), seed)
}

fn attack_labels(batch_labels: &[usize], n_classes: usize, mode: TargetMode, seed: u64) -> Result<Vec<usize>> {
    match mode {
        TargetMode::RandomTarget => select_targets(batch_labels, n_classes, rng::derive(seed, &[tags::ATTACK])),
        TargetMode::Untargeted => Ok(batch_labels.to_vec()),
    }
}

fn checked_loss<T: Scalar>(loss: T, step: usize) -> Result<T> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("attack loss {loss} at step {step}")))
    }
}

pub fn pgd_pyramid_attack_observed<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    drop: &DropRealization,
    batch: &ImageBatch<T>,
    spec: &PyramidSpec,
    seed: u64,
    observer: &mut StepObserver<'_, T>,
) -> Result<AttackResult<T>> {
    spec.validate()?;
    let shape = batch.shape();
    batch.check_labels(model.n_classes())?;
    let targets = attack_labels(&batch.labels, model.n_classes(), spec.target_mode, seed)?;
    // Targeted: descend cross-entropy toward the target. Untargeted: ascend it.
    let direction = match spec.target_mode {
        TargetMode::RandomTarget => -T::one(),
        TargetMode::Untargeted => T::one(),
    };
    let step = T::of(spec.step_size);

    let mut pyramid = init_pyramid::<T>(spec, shape)?;
    let mut per_step_loss = Vec::with_capacity(spec.n_steps + 1);
    let mut projected_entries = 0;

    if spec.random_mode == RandomMode::RandomSign {
        let x = perturb_unclipped(&batch.pixels, &pyramid, spec)?;
        per_step_loss.push(checked_loss(model.loss(&x, &targets, drop)?, 0)?);
        pyramid = random_perturbation(spec, shape, rng::derive(seed, &[tags::RANDOM_PERTURBATION]))?;
        observer(0, &pyramid);
    } else {
        for k in 0..spec.n_steps {
            let x = perturb_unclipped(&batch.pixels, &pyramid, spec)?;
            let (loss, pixel_grad) = model.loss_and_input_grad(&x, &targets, drop)?;
            per_step_loss.push(checked_loss(loss, k)?);
            if let Some(bad) = pixel_grad.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("input gradient {bad} at attack step {k}")));
            }
            let grads = pyramid_gradient(&pyramid, spec, &pixel_grad)?;
            for (level, g) in pyramid.levels.iter_mut().zip(&grads.levels) {
                Zip::from(level).and(g).for_each(|d, &gv| {
                    *d += direction * step * sign(gv);
                });
            }
            projected_entries += project_in_place(&mut pyramid, spec);
            observer(k, &pyramid);
        }
    }

    let x = perturb_unclipped(&batch.pixels, &pyramid, spec)?;
    per_step_loss.push(checked_loss(model.loss(&x, &targets, drop)?, spec.n_steps)?);

    let perturbed = apply_pyramid(batch, &pyramid, spec)?;
    Ok(AttackResult {
        perturbed,
        pyramid,
        per_step_loss,
        target_labels: targets,
        projected_entries,
    })
}

/// `sign` with `sign(0) = 0`.
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
