//! Training loop with metrics and checkpoint files.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::backbone::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::backbone::{init_params, ModelConfig};
use crate::dataio::{augment, train_batch_indices, DatasetHandle};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::trainer::step::{step_seed, train_step, MetricsRecord, TrainState, METRICS_HEADER};
use crate::trainer::TrainConfig;

pub const METRICS_FILE: &str = "metrics.csv";
/// Measured step times; kept apart so `metrics.csv` stays reproducible.
pub const TIMINGS_FILE: &str = "timings.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Records of the steps run by this call.
    pub records: Vec<MetricsRecord>,
    pub final_checkpoint: PathBuf,
}

/// Batch for training step `step`: the step's slice of the epoch permutation,
/// augmented with the step's seed when enabled.
pub fn training_batch(
    data: &DatasetHandle,
    cfg: &TrainConfig,
    step: u64,
) -> Result<crate::batch::ImageBatch<f32>> {
    let idx = train_batch_indices(data.train.len(), cfg.batch_size, cfg.seed, step)?;
    let batch = data.train.gather(&idx);
    Ok(if cfg.augment {
        augment(&batch, rng::derive(step_seed(cfg.seed, step), &[tags::AUGMENT]))
    } else {
        batch
    })
}

fn check_compatible(model: &ModelConfig, data: &DatasetHandle) -> Result<()> {
    if model.image_size != data.image_size || model.channels != data.channels || model.n_classes != data.n_classes {
        return Err(Error::config(format!(
            "model expects {0}x{0}x{1} images and {2} classes; dataset {3} has {4}x{4}x{5} and {6}",
            model.image_size,
            model.channels,
            model.n_classes,
            data.name,
            data.image_size,
            data.channels,
            data.n_classes
        )));
    }
    Ok(())
}

/// Keeps the header and rows for steps before `step`.
fn truncate_csv(path: &Path, header: &str, step: u64) -> Result<()> {
    let kept: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s < step)
            })
            .map(str::to_owned)
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut f = File::create(path)?;
    writeln!(f, "{header}")?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?))
}

/// Runs from step 0, or from `resume` (a checkpoint written by an earlier
/// run with the same configuration), to `cfg.total_steps`. Resuming
/// reproduces the uninterrupted metrics file bitwise in reference mode.
pub fn train_loop(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &DatasetHandle,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if data.train.is_empty() {
        return Err(Error::config(format!("dataset {} has an empty training split", data.name)));
    }
    check_compatible(model, data)?;
    fs::create_dir_all(out_dir)?;

    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if &ckpt.params.config != model {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config", path.display())));
            }
            let moments = ckpt
                .optimizer
                .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", path.display())))?;
            if ckpt.step > cfg.total_steps {
                return Err(Error::Checkpoint(format!(
                    "{} is at step {}, past total_steps {}",
                    path.display(),
                    ckpt.step,
                    cfg.total_steps
                )));
            }
            TrainState {
                params: ckpt.params,
                moments,
                step: ckpt.step,
            }
        }
        None => TrainState::new(init_params(model, cfg.seed)?),
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let timings_path = out_dir.join(TIMINGS_FILE);
    truncate_csv(&metrics_path, METRICS_HEADER, state.step)?;
    truncate_csv(&timings_path, "step,wall_time_s", state.step)?;
    let mut metrics = open_append(&metrics_path)?;
    let mut timings = open_append(&timings_path)?;

    let save = |state: &TrainState| -> Result<PathBuf> {
        let path = out_dir.join(checkpoint_name(state.step));
        save_checkpoint(
            &path,
            &Checkpoint {
                params: state.params.clone(),
                step: state.step,
                optimizer: Some(state.moments.clone()),
            },
        )?;
        Ok(path)
    };

    let mut records = Vec::new();
    while state.step < cfg.total_steps {
        let batch = training_batch(data, cfg, state.step)?;
        let mut record = match train_step(&mut state, &batch, cfg) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                fs::write(out_dir.join(DIAGNOSTICS_FILE), format!("{e}\n"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(timings, "{},{}", record.step, record.wall_time_s)?;
        if cfg.reference_mode {
            record.wall_time_s = 0.0;
        }
        writeln!(metrics, "{}", record.csv_row())?;
        metrics.flush()?;
        timings.flush()?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.total_steps {
            save(&state)?;
        }
        records.push(record);
    }
    let final_checkpoint = save(&state)?;
    Ok(TrainOutcome {
        state,
        records,
        final_checkpoint,
    })
}
