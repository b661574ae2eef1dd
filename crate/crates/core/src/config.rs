//! Run configuration: a TOML file with a strict schema, environment
//! overrides under the `RAEMEPC_` prefix, and an emitted effective config
//! capturing every resolved default.
//!
//! Override paths use double underscores for nesting, so
//! `RAEMEPC_TRAIN__EPOCHS=50` sets `train.epochs` and `RAEMEPC_SEED=7`
//! sets the top-level seed. Values are parsed as TOML fragments (numbers,
//! booleans, arrays) and fall back to strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RaemepcError, Result};
use crate::losses::LossWeights;
use crate::trainer::{GridSpec, TrainConfig};

pub const ENV_PREFIX: &str = "RAEMEPC_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_path: PathBuf,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub test_labels_path: Option<PathBuf>,
    /// `plain` or `csv`; omitted means detect from the extension.
    #[serde(default)]
    pub format: Option<String>,
    pub window_len: usize,
    pub stride: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_k")]
    pub k_enc: usize,
    #[serde(default = "default_k")]
    pub k_dec: usize,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            k_enc: default_k(),
            k_dec: default_k(),
            tau: default_tau(),
            hidden_dim: default_hidden(),
            beta: default_beta(),
            noise_scale: default_noise(),
        }
    }
}

fn default_k() -> usize {
    3
}
fn default_tau() -> usize {
    4
}
fn default_hidden() -> usize {
    32
}
fn default_beta() -> f64 {
    0.1
}
fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            patience: default_patience(),
            clip_norm: default_clip(),
        }
    }
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.001
}
fn default_patience() -> usize {
    20
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSection {
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Defaults to the training stride when omitted.
    #[serde(default)]
    pub stride: Option<usize>,
}

/// Everything one run needs; see the module docs for override rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(f) = &self.data.format {
            if f != "plain" && f != "csv" {
                return Err(RaemepcError::Config(format!(
                    "data.format must be \"plain\" or \"csv\", got {f:?}"
                )));
            }
        }
        let spec = self.split_spec();
        spec.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        if let Some(thr) = self.detect.threshold {
            if thr < 0.0 {
                return Err(RaemepcError::Config("detect.threshold must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn split_spec(&self) -> crate::data::SplitSpec {
        crate::data::SplitSpec {
            window_len: self.data.window_len,
            stride: self.data.stride,
            validation_fraction: self.data.validation_fraction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            patience: self.train.patience,
            clip_norm: self.train.clip_norm,
            seed: self.seed,
        }
    }

    pub fn series_format(&self) -> Option<crate::data::SeriesFormat> {
        self.data.format.as_deref().map(|f| match f {
            "csv" => crate::data::SeriesFormat::Csv,
            _ => crate::data::SeriesFormat::Plain,
        })
    }

    /// Model configuration for a given input dimensionality.
    pub fn model_config(&self, input_dim: usize) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            input_dim,
            window_len: self.data.window_len,
            k_enc: self.model.k_enc,
            k_dec: self.model.k_dec,
            tau: self.model.tau,
            hidden_dim: self.model.hidden_dim,
            beta: self.model.beta,
            noise_scale: self.model.noise_scale,
            seed: self.seed,
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| RaemepcError::Config(format!("config serialization failed: {e}")))
    }
}

/// Loads a config file and applies `RAEMEPC_*` environment overrides.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| RaemepcError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut value: toml::Value = text.parse().map_err(|e| RaemepcError::Config(format!(
        "{}: {e}",
        path.display()
    )))?;
    let overrides: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    apply_env_overrides(&mut value, &overrides)?;
    let cfg: RunConfig = value
        .try_into()
        .map_err(|e| RaemepcError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies overrides onto a parsed TOML tree. Key paths come from the
/// variable name after the prefix, lowercased, split on `__`.
pub fn apply_env_overrides(value: &mut toml::Value, vars: &[(String, String)]) -> Result<()> {
    for (key, raw) in vars {
        let path = key[ENV_PREFIX.len()..].to_lowercase();
        if path.is_empty() {
            continue;
        }
        let segments: Vec<&str> = path.split("__").collect();
        let parsed = parse_override(raw);
        let (last, rest) = segments.split_last().unwrap();
        let mut node = &mut *value;
        for seg in rest {
            node = node
                .as_table_mut()
                .ok_or_else(|| {
                    RaemepcError::Config(format!("override {key} walks through a non-table"))
                })?
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        node.as_table_mut()
            .ok_or_else(|| {
                RaemepcError::Config(format!("override {key} walks through a non-table"))
            })?
            .insert(last.to_string(), parsed);
    }
    Ok(())
}

/// Numbers, booleans, and arrays parse as TOML; anything else is a string.
fn parse_override(raw: &str) -> toml::Value {
    let fragment = format!("x = {raw}");
    if let Ok(v) = fragment.parse::<toml::Value>() {
        if let Some(t) = v.as_table() {
            if let Some(x) = t.get("x") {
                return x.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}
