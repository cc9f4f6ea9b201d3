//! Acceptance suite. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test -p pyramidat-cli --test acceptance -- --nocapture` to see them.
//! The CIFAR-10 trend checks are `#[ignore]`d: they need the binary archive
//! under `PYRAMIDAT_DATA_ROOT` and several CPU hours.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use ndarray::Array4;
use rand::Rng;

use pyramidat::attack::pgd_pyramid_attack_observed;
use pyramidat::backbone::checkpoint::load_params;
use pyramidat::backbone::{count_correct, ForwardMasks, MaskLog};
use pyramidat::dataio::{self, DatasetConfig, DatasetHandle, SplitData, DATA_ROOT_ENV};
use pyramidat::evaluator::{
    evaluate_clean, evaluate_corruption_suite, full_suite, noise_robustness_curve, spectral_report, whitebox_eval,
    default_whitebox_attacks, BandKind, CorruptionKind, CorruptionSpec,
};
use pyramidat::pyramid::{expand_pyramid, perturb_unclipped, project_pyramid, pyramid_gradient, init_pyramid};
use pyramidat::rng;
use pyramidat::trainer::{train_loop, train_step_traced, training_batch, Regime, TrainConfig, TrainState};
use pyramidat::{
    init_params, pgd_pixel_attack, pgd_pyramid_attack, Differentiable, DropMode, DropRealization, ImageBatch,
    ImageShape, ModelConfig, Params32, PerturbationPyramid, PixelSpec, PyramidSpec, RandomMode, TargetMode,
};
use pyramidat_cli::commands::collect_perturbations;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn tiny(image_size: usize, depth: usize, n_classes: usize, dropout_p: f64, stochdepth_p: f64) -> ModelConfig {
    ModelConfig {
        image_size,
        patch_size: 4,
        channels: 3,
        embed_dim: 32,
        depth,
        n_heads: 2,
        mlp_dim: 64,
        n_classes,
        dropout_p,
        stochdepth_p,
    }
}

fn random_batch<T: pyramidat::Scalar>(shape: ImageShape, n_classes: usize, seed: u64) -> ImageBatch<T> {
    let mut r = rng::rng_for(seed, &[]);
    let px = Array4::from_shape_fn(shape.dims(), |_| T::of(r.random_range(0.0..1.0)));
    let labels = (0..shape.batch).map(|_| r.random_range(0..n_classes)).collect();
    ImageBatch::new(px, labels).unwrap()
}

#[test]
fn c01_expansion_matches_brute_force_sum() {
    let mut r = rng::rng_for(101, &[]);
    let mut mismatches = 0usize;
    let mut pixels = 0usize;
    for _ in 0..200 {
        let shape = ImageShape::new(r.random_range(1..=2), r.random_range(1..=16), r.random_range(1..=16), r.random_range(1..=3));
        let n_levels = r.random_range(1..=4);
        let scales: Vec<usize> = (0..n_levels).map(|_| r.random_range(1..=9)).collect();
        let spec = PyramidSpec {
            multipliers: (0..n_levels).map(|_| r.random_range(0.0..25.0)).collect(),
            eps: (0..n_levels).map(|_| r.random_range(0.0..0.1)).collect(),
            scales,
            ..PyramidSpec::desk_default()
        };
        let mut pyr: PerturbationPyramid<f64> = init_pyramid(&spec, shape).unwrap();
        for (level, &eps) in pyr.levels.iter_mut().zip(&spec.eps) {
            // Half the entries land outside the budget so clipping is exercised.
            level.mapv_inplace(|_| r.random_range(-2.0 * eps..=2.0 * eps));
        }
        let got = expand_pyramid(&pyr, &spec, shape).unwrap();
        let (b, h, w, c) = shape.dims();
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let mut want = 0.0f64;
                        for l in 0..spec.levels() {
                            let (s, m, eps) = (spec.scales[l], spec.multipliers[l], spec.eps[l]);
                            want += m * pyr.levels[l][[n, i / s, j / s, ch]].clamp(-eps, eps);
                        }
                        pixels += 1;
                        if want.to_bits() != got[[n, i, j, ch]].to_bits() {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(1, "expansion oracle", mismatches == 0, format!("200 instances, {pixels} pixels, {mismatches} mismatches"));
}

#[test]
fn c02_level_gradients_match_finite_differences() {
    let cfg = tiny(16, 2, 10, 0.0, 0.0);
    let params = init_params::<f64>(&cfg, 21).unwrap();
    let batch = random_batch::<f64>(ImageShape::new(2, 16, 16, 3), 10, 22);
    let spec = PyramidSpec::desk_default();
    let targets = vec![3, 7];
    let drop = DropRealization::disabled();
    let mut r = rng::rng_for(23, &[]);
    let mut pyr: PerturbationPyramid<f64> = init_pyramid(&spec, batch.shape()).unwrap();
    for (level, &eps) in pyr.levels.iter_mut().zip(&spec.eps) {
        // Stay clear of the clip kinks.
        level.mapv_inplace(|_| r.random_range(-0.5 * eps..0.5 * eps));
    }
    let loss_at = |p: &PerturbationPyramid<f64>| {
        params.loss(&perturb_unclipped(&batch.pixels, p, &spec).unwrap(), &targets, &drop).unwrap()
    };
    let x = perturb_unclipped(&batch.pixels, &pyr, &spec).unwrap();
    let (_, pixel_grad) = params.loss_and_input_grad(&x, &targets, &drop).unwrap();
    let analytic = pyramid_gradient(&pyr, &spec, &pixel_grad).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for l in 0..spec.levels() {
        let dims = pyr.levels[l].dim();
        for _ in 0..50 {
            let idx = [
                r.random_range(0..dims.0),
                r.random_range(0..dims.1),
                r.random_range(0..dims.2),
                r.random_range(0..dims.3),
            ];
            let mut plus = pyr.clone();
            plus.levels[l][idx] += h;
            let mut minus = pyr.clone();
            minus.levels[l][idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let a = analytic.levels[l][idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-300);
            worst = worst.max(rel);
        }
    }
    verdict(2, "gradient oracle", worst <= 1e-4, format!("3 levels x 50 coordinates, max relative error {worst:.3e}"));
}

#[test]
fn c03_budgets_hold_and_default_projection_is_inert() {
    let cfg = tiny(32, 2, 10, 0.0, 0.0);
    let params = init_params::<f32>(&cfg, 31).unwrap();
    let batch = random_batch::<f32>(ImageShape::new(64, 32, 32, 3), 10, 32);
    let drop = DropRealization::disabled();

    let run = |spec: &PyramidSpec| {
        let mut budget_ok = true;
        let mut inert = true;
        let r = pgd_pyramid_attack_observed(&params, &drop, &batch, spec, 33, &mut |_, p: &PerturbationPyramid<f32>| {
            for (level, &eps) in p.levels.iter().zip(&spec.eps) {
                budget_ok &= level.iter().all(|v| v.abs() <= eps as f32);
            }
            inert &= project_pyramid(p, spec) == *p;
        })
        .unwrap();
        let range_ok = r.perturbed.pixels.iter().all(|v| (0.0..=1.0).contains(v));
        (budget_ok && range_ok, inert && r.projected_entries == 0, r.projected_entries)
    };

    let default = PyramidSpec::desk_default();
    let (default_ok, default_inert, _) = run(&default);
    // A step that overshoots the budget, so the invariant is checked with projection active.
    let large = PyramidSpec { step_size: 4.0 / 255.0, ..default.clone() };
    let (large_ok, _, large_moved) = run(&large);
    verdict(
        3,
        "budget invariants",
        default_ok && default_inert && large_ok && large_moved > 0,
        format!(
            "default: bounds {default_ok}, projection inert {default_inert}; step 4/255: bounds {large_ok}, {large_moved} entries projected"
        ),
    );
}

#[test]
fn c04_matched_masks_identical_for_twenty_steps() {
    let data = dataio::load_dataset(&DatasetConfig {
        name: "synthetic".into(),
        n_train: 128,
        n_eval: 8,
        image_size: 16,
        seed: 41,
        ..Default::default()
    })
    .unwrap();
    let train = TrainConfig {
        regime: Regime::PyramidAt,
        drop_mode: DropMode::Matched,
        warmup_steps: 2,
        total_steps: 20,
        batch_size: 8,
        seed: 42,
        ..Default::default()
    };
    let mut state = TrainState::new(init_params::<f32>(&tiny(16, 2, 2, 0.1, 0.1), 43).unwrap());
    let mut all_ok = true;
    let mut attack_passes = usize::MAX;
    let mut dropped = 0usize;
    for step in 0..20 {
        let log: MaskLog = Default::default();
        train_step_traced(&mut state, &training_batch(&data, &train, step).unwrap(), &train, &log).unwrap();
        let passes: Vec<ForwardMasks> = log.lock().unwrap().clone();
        let count = |b: &str| passes.iter().filter(|p| p.branch == b).count();
        attack_passes = attack_passes.min(count("attack"));
        all_ok &= count("clean") == 1 && count("adversarial") == 1 && count("attack") >= 5;
        all_ok &= passes.iter().all(|p| p.same_masks(&passes[0]));
        dropped += passes[0].masks.iter().flat_map(|(_, _, k)| k).filter(|k| !**k).count();
    }
    verdict(
        4,
        "matched dropout instrumentation",
        all_ok && dropped > 0,
        format!("20 steps, >= {attack_passes} attack forwards per step, {dropped} dropped units, all passes identical: {all_ok}"),
    );
}

/// Plain per-pixel signed PGD toward `targets`, written without pyramids.
fn reference_pixel_pgd(
    model: &Params32,
    batch: &ImageBatch<f32>,
    targets: &[usize],
    eps: f32,
    step: f32,
    n_steps: usize,
) -> (Vec<f32>, Array4<f32>) {
    let drop = DropRealization::disabled();
    let mut delta = Array4::<f32>::zeros(batch.pixels.dim());
    let mut losses = Vec::new();
    for _ in 0..n_steps {
        let (loss, g) = model.loss_and_input_grad(&(&delta + &batch.pixels), targets, &drop).unwrap();
        losses.push(loss);
        ndarray::Zip::from(&mut delta).and(&g).for_each(|d, &gv| {
            let s = if gv > 0.0 { 1.0 } else if gv < 0.0 { -1.0 } else { 0.0 };
            *d = (*d + -step * s).clamp(-eps, eps);
        });
    }
    losses.push(model.loss(&(&delta + &batch.pixels), targets, &drop).unwrap());
    let out = (&delta + &batch.pixels).mapv(|v| v.clamp(0.0, 1.0));
    (losses, out)
}

#[test]
fn c05_single_level_pyramid_is_the_pixel_attack() {
    let params = init_params::<f32>(&tiny(16, 2, 10, 0.0, 0.0), 51).unwrap();
    let batch = random_batch::<f32>(ImageShape::new(16, 16, 16, 3), 10, 52);
    let drop = DropRealization::disabled();
    let pixel = PixelSpec::default();
    let spec = PyramidSpec {
        scales: vec![1],
        multipliers: vec![1.0],
        eps: vec![4.0 / 255.0],
        step_size: 1.0 / 255.0,
        n_steps: 5,
        target_mode: TargetMode::RandomTarget,
        random_mode: RandomMode::Adversarial,
    };
    let a = pgd_pixel_attack(&params, &drop, &batch, &pixel, 53).unwrap();
    let b = pgd_pyramid_attack(&params, &drop, &batch, &spec, 53).unwrap();
    let (ref_loss, ref_out) = reference_pixel_pgd(&params, &batch, &a.target_labels, 4.0 / 255.0, 1.0 / 255.0, 5);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_spec = bits(&a.per_step_loss) == bits(&b.per_step_loss) && a.perturbed == b.perturbed;
    let same_ref = bits(&a.per_step_loss) == bits(&ref_loss) && a.perturbed.pixels == ref_out;
    verdict(
        5,
        "special-case reduction",
        same_spec && same_ref,
        format!("{} losses; pyramid spec bitwise {same_spec}, plain pixel PGD bitwise {same_ref}", a.per_step_loss.len()),
    );
}

struct Shapes {
    data: DatasetHandle,
    params: Params32,
}

/// Tiny ViTs trained on the synthetic shapes set, one per seed.
fn shapes_models() -> &'static [Shapes] {
    static MODELS: OnceLock<Vec<Shapes>> = OnceLock::new();
    MODELS.get_or_init(|| {
        (1..=3)
            .map(|seed| {
                let data = dataio::load_dataset(&DatasetConfig {
                    name: "synthetic".into(),
                    n_train: 4096,
                    n_eval: 256,
                    image_size: 16,
                    seed,
                    ..Default::default()
                })
                .unwrap();
                let cfg = TrainConfig {
                    regime: Regime::Baseline,
                    drop_mode: DropMode::DisabledAll,
                    base_lr: 1e-3,
                    warmup_steps: 75,
                    total_steps: 1500,
                    batch_size: 64,
                    weight_decay: 0.0,
                    augment: true,
                    seed,
                    ..Default::default()
                };
                let dir = tempfile::tempdir().unwrap();
                let params = train_loop(&cfg, &tiny(16, 2, 2, 0.0, 0.0), &data, dir.path(), None)
                    .unwrap()
                    .state
                    .params;
                Shapes { data, params }
            })
            .collect()
    })
}

fn attacked_accuracy(params: &Params32, split: &SplitData, spec: &PyramidSpec, seed: u64) -> f64 {
    let batch = split.gather(&(0..split.len()).collect::<Vec<_>>());
    let r = pgd_pyramid_attack(params, &DropRealization::disabled(), &batch, spec, seed).unwrap();
    let logits = params.logits(&r.perturbed.pixels, &DropRealization::disabled()).unwrap();
    count_correct(&logits, &batch.labels) as f64 / batch.len() as f64
}

#[test]
fn c06_pyramid_attack_breaks_a_trained_model() {
    let mut lines = Vec::new();
    let mut pass = true;
    for (k, m) in shapes_models().iter().enumerate() {
        let clean = evaluate_clean(&m.params, &m.data.eval, 256).unwrap().fraction();
        let attacked = attacked_accuracy(&m.params, &m.data.eval, &PyramidSpec::desk_default(), 60 + k as u64);
        pass &= clean >= 0.99 && clean - attacked >= 0.30;
        lines.push(format!("seed {}: clean {clean:.3} attacked {attacked:.3}", k + 1));
    }
    verdict(6, "attack efficacy", pass, lines.join("; "));
}

#[test]
fn c09_adversarial_pyramids_are_low_frequency() {
    let m = &shapes_models()[0];
    let pyramid = PyramidSpec::desk_default();
    let random_pixel = PyramidSpec {
        random_mode: RandomMode::RandomSign,
        ..PixelSpec::default().to_pyramid()
    };
    let adv = collect_perturbations(&m.params, &m.data.eval, &pyramid, 256, 64, 91).unwrap();
    let noise = collect_perturbations(&m.params, &m.data.eval, &random_pixel, 256, 64, 92).unwrap();
    assert_eq!((adv.len(), noise.len()), (256, 256));
    let fa = spectral_report(&adv).unwrap().low_freq_energy_fraction;
    let fr = spectral_report(&noise).unwrap().low_freq_energy_fraction;
    verdict(
        9,
        "spectral property",
        fa >= fr + 0.10 && (fr - 0.25).abs() <= 0.02,
        format!("adversarial pyramid {fa:.4}, random pixel {fr:.4}"),
    );
}

#[test]
fn c12_cli_training_is_bitwise_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
schema_version = 1
seed = 12

[model]
image_size = 16
patch_size = 4
embed_dim = 16
depth = 2
n_heads = 2
mlp_dim = 32
n_classes = 2
dropout_p = 0.1
stochdepth_p = 0.1

[dataset]
name = "synthetic"
n_train = 512
n_eval = 16
image_size = 16

[trainer]
regime = "pyramid_at"
total_steps = 100
warmup_steps = 10
batch_size = 16
"#,
    )
    .unwrap();
    let train = |config: &Path, out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_pyramidat"))
            .args(["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = dir.path().join("a");
    let first = train(&cfg, &a);
    let second = train(&a.join("resolved_config.toml"), &dir.path().join("b"));
    let rows = String::from_utf8_lossy(&first).lines().count() - 1;
    verdict(
        12,
        "determinism",
        rows == 100 && first == second,
        format!("{rows} metric rows, identical bytes: {}", first == second),
    );
}

// CIFAR-10 trend checks.

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: u64 = 30;

fn cifar() -> &'static DatasetHandle {
    static DATA: OnceLock<DatasetHandle> = OnceLock::new();
    DATA.get_or_init(|| {
        assert!(std::env::var_os(DATA_ROOT_ENV).is_some(), "set {DATA_ROOT_ENV} to the CIFAR-10 binary archive");
        dataio::load_dataset(&DatasetConfig {
            name: "cifar10".into(),
            train_limit: 10_000,
            ..Default::default()
        })
        .unwrap()
    })
}

/// Trains (or reloads from `target/acceptance-cifar`) one desk-scale model.
fn cifar_model(regime: Regime, drop_mode: DropMode, seed: u64) -> Params32 {
    let data = cifar();
    let batch_size = 64;
    let total_steps = EPOCHS * (data.train.len() / batch_size) as u64;
    let cfg = TrainConfig {
        regime,
        drop_mode,
        batch_size,
        total_steps,
        warmup_steps: total_steps / 20,
        seed,
        ..Default::default()
    };
    let dir: PathBuf = [env!("CARGO_TARGET_TMPDIR"), "acceptance-cifar", &format!("{regime:?}-{drop_mode:?}-{seed}")]
        .iter()
        .collect();
    let ckpt = dir.join(pyramidat::trainer::checkpoint_name(total_steps));
    if ckpt.is_file() {
        return load_params(&ckpt).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    train_loop(&cfg, &ModelConfig::default(), data, &dir, None).unwrap().state.params
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn clean_acc(p: &Params32) -> f64 {
    evaluate_clean(p, &cifar().eval, 256).unwrap().fraction()
}

#[test]
#[ignore = "needs CIFAR-10 under PYRAMIDAT_DATA_ROOT and hours of CPU"]
fn c07_pyramid_training_trend_on_cifar() {
    let noise = [CorruptionSpec::new(CorruptionKind::GaussianNoise, 3).unwrap()];
    let score = |regime| {
        let runs: Vec<(f64, f64)> = SEEDS
            .iter()
            .map(|&s| {
                let p = cifar_model(regime, DropMode::Matched, s);
                let n = evaluate_corruption_suite(&p, &cifar().eval, &noise, 70, 256).unwrap().mean_accuracy();
                (clean_acc(&p), n)
            })
            .collect();
        (mean(runs.iter().map(|r| r.0)), mean(runs.iter().map(|r| r.1)))
    };
    let (bc, bn) = score(Regime::Baseline);
    let (pc, pn) = score(Regime::PyramidAt);
    verdict(
        7,
        "desk-scale trend",
        pc >= bc - 0.005 && pn >= bn + 0.01,
        format!("clean baseline {bc:.4} pyramid {pc:.4}; noise-3 baseline {bn:.4} pyramid {pn:.4}"),
    );
}

#[test]
#[ignore = "needs CIFAR-10 under PYRAMIDAT_DATA_ROOT and hours of CPU"]
fn c08_disabling_adversarial_dropout_trades_clean_for_corruption() {
    let suite = full_suite();
    let score = |mode| {
        let runs: Vec<(f64, f64)> = SEEDS
            .iter()
            .map(|&s| {
                let p = cifar_model(Regime::PyramidAt, mode, s);
                let c = evaluate_corruption_suite(&p, &cifar().eval, &suite, 80, 256).unwrap().mean_accuracy();
                (clean_acc(&p), c)
            })
            .collect();
        (mean(runs.iter().map(|r| r.0)), mean(runs.iter().map(|r| r.1)))
    };
    let (mc, mr) = score(DropMode::Matched);
    let (dc, dr) = score(DropMode::DisabledAdv);
    verdict(
        8,
        "dropout ablation trend",
        dr > mr && dc < mc,
        format!("clean matched {mc:.4} disabled_adv {dc:.4}; corruption matched {mr:.4} disabled_adv {dr:.4}"),
    );
}

#[test]
#[ignore = "needs CIFAR-10 under PYRAMIDAT_DATA_ROOT and hours of CPU"]
fn c10_pyramid_model_resists_low_frequency_noise() {
    // Lowest nonzero cutoff: a cutoff of zero keeps only the constant offset.
    let (cutoff, l2) = (0.05, 4.0);
    let score = |regime| {
        mean(SEEDS.iter().map(|&s| {
            let p = cifar_model(regime, DropMode::Matched, s);
            noise_robustness_curve(&p, &cifar().eval, BandKind::LowPass, &[cutoff], l2, 100, 256).unwrap()[0].accuracy
        }))
    };
    let (b, p) = (score(Regime::Baseline), score(Regime::PyramidAt));
    verdict(10, "filtered-noise curves", p >= b, format!("low-pass {cutoff} at L2 {l2}: baseline {b:.4} pyramid {p:.4}"));
}

#[test]
#[ignore = "needs CIFAR-10 under PYRAMIDAT_DATA_ROOT and hours of CPU"]
fn c11_each_model_is_strongest_under_its_own_attack() {
    let attacks = default_whitebox_attacks();
    let eval = {
        let mut e = cifar().eval.clone();
        e.truncate(1000);
        e
    };
    let rows = |regime| {
        let p = cifar_model(regime, DropMode::Matched, SEEDS[0]);
        whitebox_eval(&p, &eval, &attacks, 110, 100).unwrap()
    };
    let acc = |r: &[pyramidat::evaluator::WhiteboxRow], name: &str| r.iter().find(|x| x.attack == name).unwrap().accuracy;
    let base = rows(Regime::Baseline);
    let pixel = rows(Regime::PixelAt);
    let pyr = rows(Regime::PyramidAt);
    let pixel_best = acc(&pixel, "pixel_pgd") >= acc(&base, "pixel_pgd").max(acc(&pyr, "pixel_pgd"));
    let pyr_best = acc(&pyr, "pyramid_pgd") >= acc(&base, "pyramid_pgd").max(acc(&pixel, "pyramid_pgd"));
    let table = [("baseline", &base), ("pixel_at", &pixel), ("pyramid_at", &pyr)]
        .iter()
        .map(|(n, r)| format!("{n} pixel {:.3} pyramid {:.3}", acc(r, "pixel_pgd"), acc(r, "pyramid_pgd")))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(11, "white-box table", pixel_best && pyr_best, table);
}
