//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use pyramidat::backbone::checkpoint::load_params;
use pyramidat::dataio::{eval_ranges, load_dataset, DatasetHandle, SplitData};
use pyramidat::evaluator::{
    evaluate_clean, evaluate_corruption_suite, full_suite, noise_robustness_curve, spectral_report, whitebox_eval,
    BandKind, CorruptionTable, CurvePoint, WhiteboxRow,
};
use pyramidat::pyramid::{expand_level, expand_pyramid};
use pyramidat::trainer::train_loop;
use pyramidat::{pgd_pyramid_attack, rng, DropRealization, ImageShape, Params32, PyramidSpec, RandomMode};
use serde_json::{json, Map, Value};

use crate::config::{load_run_config, RunConfig, Suite};
use crate::output::{write_array, write_grid, write_json, write_perturbation_png, write_png};
use crate::{CliError, Command, Common};

pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { common, resume } => {
            let (cfg, out) = prepare(common)?;
            train(&cfg, &out, resume.as_deref())
        }
        Command::Attack { common, checkpoint } => {
            let (cfg, out) = prepare(common)?;
            attack(&cfg, &out, checkpoint)
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = prepare(common)?;
            eval(&cfg, &out, checkpoint)
        }
        Command::Analyze { common, checkpoint } => {
            let (cfg, out) = prepare(common)?;
            analyze(&cfg, &out, checkpoint)
        }
    }
}

/// Loads and resolves the configuration and records it in the output directory.
fn prepare(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = load_run_config(&common.config, &common.overrides, common.seed)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    Ok((cfg, out))
}

fn load_model(path: &Path, data: &DatasetHandle) -> Result<Params32, CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} not found", path.display())));
    }
    let params: Params32 = load_params(path)?;
    let m = &params.config;
    if m.image_size != data.image_size || m.channels != data.channels || m.n_classes != data.n_classes {
        return Err(CliError::Config(format!(
            "checkpoint {} does not fit dataset {}",
            path.display(),
            data.name
        )));
    }
    Ok(params)
}

fn head(split: &SplitData, n: usize) -> SplitData {
    let mut s = split.clone();
    if n > 0 {
        s.truncate(n);
    }
    s
}

fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    if let Some(r) = resume {
        if !r.is_file() {
            return Err(CliError::Config(format!("checkpoint {} not found", r.display())));
        }
    }
    let data = load_dataset(&cfg.dataset)?;
    let outcome = train_loop(&cfg.train_config(), &cfg.model, &data, out, resume)?;
    if let Some(last) = outcome.records.last() {
        eprintln!(
            "step {}: clean_loss {:.4} adv_loss {:.4} clean_acc {:.3}; checkpoint {}",
            last.step,
            last.clean_loss,
            last.adv_loss,
            last.clean_acc,
            outcome.final_checkpoint.display()
        );
    }
    Ok(())
}

fn attack(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let data = load_dataset(&cfg.dataset)?;
    let params = load_model(checkpoint, &data)?;
    let spec = &cfg.attack.spec;
    spec.validate()?;
    let n = cfg.attack.n_samples.min(data.eval.len());
    let mut loss_csv = String::from("batch,step,loss\n");
    for (bi, range) in eval_ranges(n, cfg.attack.batch_size).into_iter().enumerate() {
        let start = range.start;
        let batch = data.eval.gather(&range.collect::<Vec<_>>());
        let seed = rng::derive(cfg.seed, &[bi as u64]);
        let r = pgd_pyramid_attack(&params, &DropRealization::disabled(), &batch, spec, seed)?;
        for (k, l) in r.per_step_loss.iter().enumerate() {
            loss_csv.push_str(&format!("{bi},{k},{l}\n"));
        }
        let shape = batch.shape();
        let levels = (0..spec.levels())
            .map(|l| expand_level(&r.pyramid, spec, shape, l))
            .collect::<Result<Vec<_>, _>>()?;
        for j in 0..batch.len() {
            let dir = out.join(format!("sample_{:04}", start + j));
            fs::create_dir_all(&dir)?;
            let original = batch.pixels.index_axis(Axis(0), j);
            let perturbed = r.perturbed.pixels.index_axis(Axis(0), j);
            write_array(&dir.join("original.pfa"), original.into_dyn())?;
            write_png(&dir.join("original.png"), original)?;
            for (l, level) in levels.iter().enumerate() {
                let v = level.index_axis(Axis(0), j);
                write_array(&dir.join(format!("level_{l}.pfa")), v.into_dyn())?;
                write_perturbation_png(&dir.join(format!("level_{l}.png")), v)?;
            }
            write_array(&dir.join("perturbed.pfa"), perturbed.into_dyn())?;
            write_png(&dir.join("perturbed.png"), perturbed)?;
            write_json(
                &dir.join("labels.json"),
                &json!({"label": batch.labels[j], "target": r.target_labels[j], "scales": spec.scales}),
            )?;
        }
    }
    fs::write(out.join("loss.csv"), loss_csv)?;
    Ok(())
}

fn corruption_table(params: &Params32, split: &SplitData, cfg: &RunConfig) -> Result<CorruptionTable, CliError> {
    Ok(evaluate_corruption_suite(params, split, &full_suite(), cfg.seed, cfg.eval.batch_size)?)
}

fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let data = load_dataset(&cfg.dataset)?;
    let params = load_model(checkpoint, &data)?;
    let reference = match (&cfg.eval.reference_checkpoint, cfg.eval.suites.contains(&Suite::Corruption)) {
        (Some(p), true) => Some(load_model(p, &data)?),
        _ => None,
    };
    let split = &data.eval;
    let bs = cfg.eval.batch_size;
    let mut summary = Map::new();

    for suite in &cfg.eval.suites {
        match suite {
            Suite::Clean => {
                let acc = evaluate_clean(&params, split, bs)?;
                fs::write(
                    out.join("clean.csv"),
                    format!("correct,total,accuracy\n{},{},{}\n", acc.correct, acc.total, acc.fraction()),
                )?;
                summary.insert("clean_accuracy".into(), json!(acc.fraction()));
            }
            Suite::Corruption => {
                let table = corruption_table(&params, split, cfg)?;
                fs::write(out.join("corruption.csv"), table.to_csv())?;
                summary.insert("corruption_mean_accuracy".into(), json!(table.mean_accuracy()));
                if let Some(r) = &reference {
                    let reference_table = corruption_table(r, split, cfg)?;
                    summary.insert("mce".into(), json!(table.mce(&reference_table)));
                }
            }
            Suite::Whitebox => {
                let attacks = vec![
                    ("pixel_pgd".to_string(), cfg.eval.whitebox_pixel.clone()),
                    ("pyramid_pgd".to_string(), cfg.eval.whitebox_pyramid.clone()),
                ];
                let rows = whitebox_eval(&params, split, &attacks, cfg.seed, bs)?;
                let mut csv = format!("{}\n", WhiteboxRow::CSV_HEADER);
                for r in &rows {
                    csv.push_str(&format!("{},{}\n", r.attack, r.accuracy));
                    summary.insert(format!("whitebox_{}", r.attack), json!(r.accuracy));
                }
                fs::write(out.join("whitebox.csv"), csv)?;
            }
            Suite::Noise => {
                let curve = noise_robustness_curve(
                    &params,
                    split,
                    cfg.eval.noise_band,
                    &cfg.eval.noise_cutoffs,
                    cfg.eval.noise_l2,
                    cfg.seed,
                    bs,
                )?;
                fs::write(out.join("noise.csv"), curve_csv(&curve))?;
                for p in &curve {
                    summary.insert(format!("noise_{}_{}", p.band.name(), p.cutoff), json!(p.accuracy));
                }
            }
        }
    }
    write_json(&out.join("summary.json"), &Value::Object(summary))
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("{}\n", CurvePoint::CSV_HEADER);
    for p in points {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// Perturbation sources of the Fourier analysis, in output order.
pub const SOURCES: [&str; 4] = ["random_pixel", "adv_pixel", "random_pyramid", "adv_pyramid"];

fn source_spec(cfg: &RunConfig, source: &str) -> PyramidSpec {
    let (base, random) = match source {
        "random_pixel" => (&cfg.analyze.pixel, true),
        "adv_pixel" => (&cfg.analyze.pixel, false),
        "random_pyramid" => (&cfg.analyze.pyramid, true),
        _ => (&cfg.analyze.pyramid, false),
    };
    PyramidSpec {
        random_mode: if random { RandomMode::RandomSign } else { RandomMode::Adversarial },
        ..base.clone()
    }
}

/// Expanded (unclipped) perturbations of the first `n` evaluation images.
pub fn collect_perturbations(
    params: &Params32,
    split: &SplitData,
    spec: &PyramidSpec,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Array3<f64>>, CliError> {
    let mut out = Vec::with_capacity(n);
    for (bi, range) in eval_ranges(n.min(split.len()), batch_size).into_iter().enumerate() {
        let batch = split.gather(&range.collect::<Vec<_>>());
        let r = pgd_pyramid_attack(
            params,
            &DropRealization::disabled(),
            &batch,
            spec,
            rng::derive(seed, &[bi as u64]),
        )?;
        let d = expand_pyramid(&r.pyramid, spec, ImageShape::of(&batch.pixels))?;
        out.extend(d.outer_iter().map(|v| v.mapv(|x| x as f64)));
    }
    Ok(out)
}

fn analyze(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let data = load_dataset(&cfg.dataset)?;
    let params = load_model(checkpoint, &data)?;
    let a = &cfg.analyze;
    let mut summary = Map::new();
    let mut spectral_csv = String::from("source,low_freq_energy_fraction,spectral_energy,spatial_energy\n");
    for (si, source) in SOURCES.iter().enumerate() {
        let spec = source_spec(cfg, source);
        let seed = rng::derive(cfg.seed, &[si as u64]);
        let deltas = collect_perturbations(&params, &data.eval, &spec, a.n_samples, a.batch_size, seed)?;
        let rep = spectral_report(&deltas)?;
        write_grid(&out.join(format!("heatmap_{source}.txt")), &rep.heatmap)?;
        write_grid(&out.join(format!("heatmap_{source}_log.txt")), &rep.log_heatmap)?;
        write_array(&out.join(format!("heatmap_{source}.pfa")), rep.heatmap.mapv(|v| v as f32).into_dyn().view())?;
        write_array(
            &out.join(format!("heatmap_{source}_log.pfa")),
            rep.log_heatmap.mapv(|v| v as f32).into_dyn().view(),
        )?;
        spectral_csv.push_str(&format!(
            "{source},{},{},{}\n",
            rep.low_freq_energy_fraction, rep.spectral_energy, rep.spatial_energy
        ));
        summary.insert(format!("low_freq_fraction_{source}"), json!(rep.low_freq_energy_fraction));
    }
    fs::write(out.join("spectral.csv"), spectral_csv)?;

    let split = head(&data.eval, a.n_samples);
    let mut curves = Vec::new();
    for band in [BandKind::LowPass, BandKind::HighPass] {
        curves.extend(noise_robustness_curve(&params, &split, band, &a.cutoffs, a.noise_l2, cfg.seed, a.batch_size)?);
    }
    fs::write(out.join("noise_curves.csv"), curve_csv(&curves))?;
    write_json(&out.join("summary.json"), &Value::Object(summary))
}
