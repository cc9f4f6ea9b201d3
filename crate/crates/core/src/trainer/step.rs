//! One optimization step of the mixed clean + adversarial objective.

use std::time::Instant;

use crate::attack::{pgd_pyramid_attack, AttackResult};
use crate::backbone::checkpoint::OptimizerMoments;
use crate::backbone::{
    count_correct, is_decayed, loss_and_grads, sample_drop_config, DropConfig, GradRequest, MaskLog, ModelParams,
    Weights,
};
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scalar::Scalar;
use crate::trainer::config::{lr_at, TrainConfig};
use crate::trainer::optim::{adamw_update, zero_moments};

/// Everything needed to continue training. All randomness is keyed by
/// `(seed, step)`, so the step counter doubles as the random state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub moments: OptimizerMoments,
    /// Completed optimization steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>) -> Self {
        let moments = zero_moments(params.count());
        Self {
            params,
            moments,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub clean_loss: f64,
    pub adv_loss: f64,
    /// `0.5 * weight_decay * sum(w^2)` over decayed tensors.
    pub decay_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub clean_acc: f64,
    /// `None` when the regime has no adversarial branch.
    pub adv_acc: Option<f64>,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "step,clean_loss,adv_loss,total_loss,lr,clean_acc,adv_acc,wall_time_s";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.clean_loss,
            self.adv_loss,
            self.total_loss,
            self.lr,
            self.clean_acc,
            self.adv_acc.map(|a| a.to_string()).unwrap_or_default(),
            self.wall_time_s
        )
    }
}

/// Seed shared by every random draw of one step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    rng::derive(seed, &[tags::STEP, step])
}

/// Drop realizations of training step `step`.
pub fn step_drop_config(params: &ModelParams<f32>, cfg: &TrainConfig, step: u64) -> DropConfig {
    sample_drop_config(&params.config, cfg.drop_mode, rng::derive(step_seed(cfg.seed, step), &[tags::DROP]))
}

/// Losses and parameter gradients of the objective at fixed inputs.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub clean_loss: T,
    pub adv_loss: T,
    pub decay_loss: T,
    pub clean_correct: usize,
    pub adv_correct: Option<usize>,
    pub grad_clean: Weights<T>,
    pub grad_adv: Option<Weights<T>>,
    /// Gradient of the decay term, `weight_decay * w` on decayed tensors.
    pub grad_decay: Weights<T>,
}

impl<T: Scalar> Objective<T> {
    /// `clean + lambda * adv + decay`.
    pub fn total_loss(&self, lambda: T) -> T {
        self.clean_loss + lambda * self.adv_loss + self.decay_loss
    }

    /// Gradient of the data terms, `grad_clean + lambda * grad_adv`. This is
    /// what the optimizer consumes; decay is applied decoupled.
    pub fn data_gradient(&self, lambda: T) -> Weights<T> {
        let mut g = self.grad_clean.clone();
        if let Some(adv) = &self.grad_adv {
            g.scaled_add(lambda, adv);
        }
        g
    }

    /// Gradient of the full objective.
    pub fn total_gradient(&self, lambda: T) -> Weights<T> {
        let mut g = self.data_gradient(lambda);
        g.scaled_add(T::one(), &self.grad_decay);
        g
    }
}

fn decay_term<T: Scalar>(params: &ModelParams<T>, weight_decay: T) -> (T, Weights<T>) {
    let mut grad = Weights::zeros(&params.config);
    let mut sq = T::zero();
    for ((name, p), (_, mut g)) in params.weights.tensors().into_iter().zip(grad.tensors_mut()) {
        if is_decayed(&name) {
            sq += p.iter().map(|v| *v * *v).sum::<T>();
            g.zip_mut_with(&p, |g, &p| *g = weight_decay * p);
        }
    }
    (T::of(0.5) * weight_decay * sq, grad)
}

/// Evaluates the objective on a clean batch and an already generated
/// adversarial batch. The adversarial input is a constant: gradients reach
/// the parameters through both forward passes but never through the attack.
pub fn objective_at<T: Scalar>(
    params: &ModelParams<T>,
    clean: &ImageBatch<T>,
    adversarial: Option<&ImageBatch<T>>,
    drop: &DropConfig,
    weight_decay: T,
) -> Result<Objective<T>> {
    let c = loss_and_grads(params, &clean.pixels, &clean.labels, drop.clean(), GradRequest::PARAMS)?;
    let (adv_loss, adv_correct, grad_adv) = match adversarial {
        Some(a) => {
            let e = loss_and_grads(params, &a.pixels, &a.labels, drop.adversarial(), GradRequest::PARAMS)?;
            let correct = count_correct(&e.logits, &a.labels);
            (e.loss, Some(correct), e.grads.weights)
        }
        None => (T::zero(), None, None),
    };
    let (decay_loss, grad_decay) = decay_term(params, weight_decay);
    Ok(Objective {
        clean_loss: c.loss,
        adv_loss,
        decay_loss,
        clean_correct: count_correct(&c.logits, &clean.labels),
        adv_correct,
        grad_clean: c.grads.weights.expect("parameter gradient requested"),
        grad_adv,
        grad_decay,
    })
}

/// Attack input for step `step`, or `None` for the baseline.
pub fn step_attack(
    params: &ModelParams<f32>,
    batch: &ImageBatch<f32>,
    cfg: &TrainConfig,
    drop: &DropConfig,
    step: u64,
) -> Result<Option<AttackResult<f32>>> {
    match cfg.attack_spec() {
        None => Ok(None),
        Some(spec) => {
            let seed = rng::derive(step_seed(cfg.seed, step), &[tags::ATTACK]);
            pgd_pyramid_attack(params, drop.attack(), batch, &spec, seed).map(Some)
        }
    }
}

/// One step: sample the step's drop realizations, generate the adversarial
/// batch, evaluate the objective and apply one AdamW update at `lr_at(step)`.
/// `batch` must already be augmented.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch<f32>, cfg: &TrainConfig) -> Result<MetricsRecord> {
    run_step(state, batch, cfg, None)
}

/// [`train_step`] that also appends every forward pass's masks to `log`,
/// labelled `clean`, `attack` or `adversarial`.
pub fn train_step_traced(
    state: &mut TrainState,
    batch: &ImageBatch<f32>,
    cfg: &TrainConfig,
    log: &MaskLog,
) -> Result<MetricsRecord> {
    run_step(state, batch, cfg, Some(log))
}

fn run_step(
    state: &mut TrainState,
    batch: &ImageBatch<f32>,
    cfg: &TrainConfig,
    log: Option<&MaskLog>,
) -> Result<MetricsRecord> {
    let started = Instant::now();
    let step = state.step;
    let lr = lr_at(step, cfg);
    batch.check_labels(state.params.config.n_classes)?;

    let mut drop = step_drop_config(&state.params, cfg, step);
    if let Some(log) = log {
        drop = drop.recording(log);
    }
    let attack = step_attack(&state.params, batch, cfg, &drop, step)?;
    let adversarial = attack.map(|a| ImageBatch {
        pixels: a.perturbed.pixels,
        labels: batch.labels.clone(),
    });
    let obj = objective_at(&state.params, batch, adversarial.as_ref(), &drop, cfg.weight_decay as f32)?;

    let lambda = cfg.adv_weight();
    let clean_loss = obj.clean_loss as f64;
    let adv_loss = obj.adv_loss as f64;
    let decay_loss = obj.decay_loss as f64;
    let total_loss = clean_loss + lambda * adv_loss + decay_loss;
    let grad = obj.data_gradient(lambda as f32);
    if !total_loss.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: lr {lr}, clean_loss {clean_loss}, adv_loss {adv_loss}, decay_loss {decay_loss}, \
             total_loss {total_loss}, finite gradient {}",
            grad.all_finite()
        )));
    }

    adamw_update(
        &mut state.params.weights,
        &grad,
        &mut state.moments,
        step + 1,
        lr as f32,
        cfg.weight_decay as f32,
    );
    if !state.params.weights.all_finite() {
        return Err(Error::NonFinite(format!("step {step}: parameters non-finite after update at lr {lr}")));
    }
    state.step += 1;

    let n = batch.len() as f64;
    Ok(MetricsRecord {
        step,
        clean_loss,
        adv_loss,
        decay_loss,
        total_loss,
        lr,
        clean_acc: obj.clean_correct as f64 / n,
        adv_acc: obj.adv_correct.map(|c| c as f64 / n),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
