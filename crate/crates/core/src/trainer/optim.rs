//! AdamW with decoupled weight decay on `.weight` tensors.

use crate::backbone::checkpoint::OptimizerMoments;
use crate::backbone::{is_decayed, Weights};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

pub fn zero_moments(n: usize) -> OptimizerMoments {
    OptimizerMoments {
        first: vec![0.0; n],
        second: vec![0.0; n],
    }
}

/// One update at 1-based iteration `t`. Decayed tensors are first shrunk by
/// `1 - lr * weight_decay`, then every tensor takes the bias-corrected
/// adaptive step.
pub fn adamw_update(
    params: &mut Weights<f32>,
    grads: &Weights<f32>,
    moments: &mut OptimizerMoments,
    t: u64,
    lr: f32,
    weight_decay: f32,
) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let mut offset = 0;
    for ((name, mut p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        let decay = if is_decayed(&name) { 1.0 - lr * weight_decay } else { 1.0 };
        let n = p.len();
        let m = &mut moments.first[offset..offset + n];
        let v = &mut moments.second[offset..offset + n];
        for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m).zip(v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p * decay - lr * mhat / (vhat.sqrt() + EPS);
        }
        offset += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, ModelConfig};

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = ModelConfig {
            depth: 1,
            ..Default::default()
        };
        let mut p = init_params::<f32>(&cfg, 0).unwrap();
        let before = p.weights.clone();
        let mut g = Weights::zeros(&cfg);
        g.head_bias.fill(2.0);
        g.patch_bias.fill(-0.5);
        let mut m = zero_moments(p.count());
        adamw_update(&mut p.weights, &g, &mut m, 1, 0.01, 0.0);
        // Bias-corrected first step is lr * sign(g).
        assert!(p.weights.head_bias.iter().all(|v| (v + 0.01).abs() < 1e-6));
        assert!(p.weights.patch_bias.iter().all(|v| (v - 0.01).abs() < 1e-6));
        assert_eq!(p.weights.head_weight, before.head_weight);
    }

    #[test]
    fn decay_only_touches_weights() {
        let cfg = ModelConfig {
            depth: 1,
            ..Default::default()
        };
        let mut p = init_params::<f32>(&cfg, 0).unwrap();
        p.weights.head_bias.fill(1.0);
        let before = p.weights.clone();
        let g = Weights::zeros(&cfg);
        let mut m = zero_moments(p.count());
        adamw_update(&mut p.weights, &g, &mut m, 1, 0.1, 0.5);
        assert_eq!(p.weights.head_bias, before.head_bias);
        assert_eq!(p.weights.head_weight, before.head_weight.mapv(|v| v * 0.95));
    }
}
