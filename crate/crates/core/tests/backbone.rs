use ndarray::{s, Array4};
use pyramidat::backbone::{forward, forward_cached, loss_and_grads, GradRequest};
use pyramidat::rng;
use pyramidat::{init_params, DropRealization, ModelConfig, Params64};
use rand::Rng;

fn config(dropout_p: f64, stochdepth_p: f64) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 2,
        channels: 3,
        embed_dim: 12,
        depth: 2,
        n_heads: 3,
        mlp_dim: 16,
        n_classes: 4,
        dropout_p,
        stochdepth_p,
    }
}

fn input(b: usize, seed: u64) -> Array4<f64> {
    let mut r = rng::rng_for(seed, &[]);
    Array4::from_shape_fn((b, 8, 8, 3), |_| r.random_range(0.0..1.0))
}

#[test]
fn depth_gate_frequency_matches_probability() {
    let p = 0.3;
    let d = DropRealization::sampled(11, 0.0, p);
    let n = 40_000;
    let dropped = (0..n).filter(|&i| !d.depth_keep(i % 8, i / 8)).count() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((dropped - n as f64 * p).abs() < 4.0 * sd, "dropped {dropped}");
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let p = 0.25;
    let d = DropRealization::sampled(5, p, 0.0);
    let n = 100_000;
    let keep = d.dropout_keep("blocks.0.mlp_hidden", 2, n);
    let mean = keep.iter().map(|&k| if k { 1.0 / (1.0 - p) } else { 0.0 }).sum::<f64>() / n as f64;
    let sd = (p / (1.0 - p) / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * sd, "mean multiplier {mean}");
}

#[test]
fn dropped_block_is_identity_on_its_example() {
    let cfg = config(0.0, 0.5);
    let params: Params64 = init_params(&cfg, 1).unwrap();
    let x = input(16, 2);
    let drop = DropRealization::sampled(7, 0.0, 0.5);
    let (_, cache) = forward_cached(&params, &x, &drop).unwrap();
    let n_tok = cfg.n_tokens();
    let mut seen = 0;
    for block in 0..cfg.depth {
        let next = if block + 1 < cfg.depth {
            cache.block_input(block + 1)
        } else {
            cache.final_tokens()
        };
        for n in 0..16 {
            let rows = s![n * n_tok..(n + 1) * n_tok, ..];
            let same = cache.block_input(block).slice(rows) == next.slice(rows);
            let gate = cache.block_gates(block)[n];
            assert_eq!(same, gate == 0.0, "block {block} example {n}");
            seen += (gate == 0.0) as usize;
        }
    }
    assert!(seen > 0);
}

#[test]
fn batch_permutation_permutes_logits() {
    let cfg = config(0.0, 0.0);
    let params: Params64 = init_params(&cfg, 3).unwrap();
    let x = input(5, 4);
    let perm = [3, 0, 4, 1, 2];
    let xp = Array4::from_shape_fn(x.dim(), |(n, i, j, c)| x[[perm[n], i, j, c]]);
    let d = DropRealization::disabled();
    let (a, b) = (forward(&params, &x, &d).unwrap(), forward(&params, &xp, &d).unwrap());
    for (n, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(n), a.row(p));
    }
}

#[test]
fn class_output_is_invariant_to_token_order() {
    // Permuting patches together with their positional embeddings only
    // reorders sums inside attention.
    let cfg = config(0.0, 0.0);
    let mut params: Params64 = init_params(&cfg, 3).unwrap();
    let x = input(2, 9);
    let d = DropRealization::disabled();
    let before = forward(&params, &x, &d).unwrap();
    let g = cfg.grid();
    let ps = cfg.patch_size;
    let perm: Vec<usize> = (0..g * g).rev().collect();
    let xp = Array4::from_shape_fn(x.dim(), |(n, i, j, c)| {
        let src = perm[(i / ps) * g + j / ps];
        x[[n, (src / g) * ps + i % ps, (src % g) * ps + j % ps, c]]
    });
    let pos = params.weights.pos_embed.clone();
    for (k, &src) in perm.iter().enumerate() {
        params.weights.pos_embed.row_mut(1 + k).assign(&pos.row(1 + src));
    }
    let after = forward(&params, &xp, &d).unwrap();
    for (a, b) in before.iter().zip(after.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let cfg = config(0.2, 0.2);
    let params: Params64 = init_params(&cfg, 5).unwrap();
    let x = input(3, 6);
    let labels = [1, 3, 0];
    let drop = DropRealization::sampled(8, 0.2, 0.2);
    let grad = loss_and_grads(&params, &x, &labels, &drop, GradRequest::INPUT)
        .unwrap()
        .grads
        .input
        .unwrap();
    let mut r = rng::rng_for(1, &[]);
    let h = 1e-6;
    for _ in 0..40 {
        let idx = (r.random_range(0..3), r.random_range(0..8), r.random_range(0..8), r.random_range(0..3));
        let loss_at = |delta: f64| {
            let mut xx = x.clone();
            xx[idx] += delta;
            loss_and_grads(&params, &xx, &labels, &drop, GradRequest::INPUT).unwrap().loss
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let an = grad[idx];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
        assert!(err < 1e-4, "{idx:?}: fd {fd} analytic {an}");
    }
}

#[test]
fn shared_realization_gives_identical_forwards() {
    let cfg = config(0.3, 0.3);
    let params: Params64 = init_params(&cfg, 5).unwrap();
    let x = input(4, 1);
    let d = DropRealization::sampled(3, 0.3, 0.3);
    let a = forward(&params, &x, &d).unwrap();
    let _ = forward(&params, &input(4, 2), &d).unwrap();
    assert_eq!(a, forward(&params, &x, &d).unwrap());
    assert_ne!(a, forward(&params, &x, &DropRealization::sampled(4, 0.3, 0.3)).unwrap());
}
