//! Run configuration files.
//!
//! A run file is TOML. Every table is optional and every missing key takes
//! its default; unknown keys are errors. `schema_version` is required.
//!
//! ```toml
//! schema_version = 1
//! seed = 0                 # global seed: training, attacks, corruptions, noise
//! out_dir = "runs/demo"
//!
//! [model]                  # image_size, patch_size, channels, embed_dim, depth,
//!                          # n_heads, mlp_dim, n_classes, dropout_p, stochdepth_p
//! [dataset]                # name ("synthetic" | "cifar10"), root, seed, n_train,
//!                          # n_eval, image_size, train_limit, eval_limit
//! [trainer]                # regime, lambda, weight_decay, base_lr, warmup_steps,
//!                          # total_steps, batch_size, drop_mode, checkpoint_every,
//!                          # augment, reference_mode
//! [trainer.attack]         # scales, multipliers, eps, step_size, n_steps,
//!                          # target_mode, random_mode
//! [trainer.pixel_attack]   # eps, step_size, n_steps, target_mode
//! [attack]                 # `attack` command: spec, n_samples, batch_size
//! [eval]                   # `eval` command
//! [analyze]                # `analyze` command
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use pyramidat::dataio::DatasetConfig;
use pyramidat::evaluator::BandKind;
use pyramidat::trainer::TrainConfig;
use pyramidat::{ModelConfig, PyramidSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub spec: PyramidSpec,
    /// Evaluation images attacked, from the start of the split.
    pub n_samples: usize,
    pub batch_size: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            spec: PyramidSpec::desk_default(),
            n_samples: 8,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Clean,
    Corruption,
    Whitebox,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub suites: Vec<Suite>,
    pub batch_size: usize,
    /// Baseline checkpoint whose corruption errors normalize mCE.
    pub reference_checkpoint: Option<PathBuf>,
    pub whitebox_pixel: PyramidSpec,
    pub whitebox_pyramid: PyramidSpec,
    pub noise_band: BandKind,
    pub noise_cutoffs: Vec<f64>,
    pub noise_l2: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let attacks = pyramidat::evaluator::default_whitebox_attacks();
        Self {
            suites: vec![Suite::Clean, Suite::Corruption, Suite::Whitebox, Suite::Noise],
            batch_size: 128,
            reference_checkpoint: None,
            whitebox_pixel: attacks[0].1.clone(),
            whitebox_pyramid: attacks[1].1.clone(),
            noise_band: BandKind::LowPass,
            noise_cutoffs: default_cutoffs(),
            noise_l2: 2.0,
        }
    }
}

fn default_cutoffs() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Evaluation images whose perturbations are averaged.
    pub n_samples: usize,
    pub batch_size: usize,
    pub pixel: PyramidSpec,
    pub pyramid: PyramidSpec,
    pub cutoffs: Vec<f64>,
    pub noise_l2: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            n_samples: 256,
            batch_size: 64,
            pixel: pyramidat::PixelSpec::default().to_pyramid(),
            pyramid: PyramidSpec::desk_default(),
            cutoffs: default_cutoffs(),
            noise_l2: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    /// Training configuration with the global seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.trainer.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), self.to_toml())?;
        Ok(())
    }
}

/// Sets `path` (dotted) in `table`. The value is read as a TOML value,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Reads `path`, applies overrides and validates the schema.
pub fn load_run_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    // Round-trip through text so errors point at the offending key.
    let merged = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: RunConfig =
        toml::from_str(&merged).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "schema_version {} is not supported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    cfg.model.validate()?;
    cfg.train_config().validate()?;
    Ok(cfg)
}
