//! The on-disk configuration file (TOML, or JSON by extension).
//!
//! API keys never live here; they come from the environment only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::remote::EndpointConfig;
use crate::eval::GroundingMetric;
use crate::grpo::{BatchMetadata, Baseline};
use crate::orchestrator::RunConfig;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "LVA_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoSection {
    #[serde(default = "default_clip")]
    pub clip_epsilon: f64,
    #[serde(default = "default_kl")]
    pub kl_coeff: f64,
    #[serde(default)]
    pub entropy_coeff: f64,
    #[serde(default = "default_floor")]
    pub std_floor: f64,
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
}

fn default_clip() -> f64 {
    0.2
}
fn default_kl() -> f64 {
    1e-3
}
fn default_floor() -> f64 {
    1e-6
}
fn default_baseline() -> Baseline {
    Baseline::GroupMean
}

impl Default for GrpoSection {
    fn default() -> Self {
        GrpoSection {
            clip_epsilon: default_clip(),
            kl_coeff: default_kl(),
            entropy_coeff: 0.0,
            std_floor: default_floor(),
            baseline: default_baseline(),
        }
    }
}

impl GrpoSection {
    pub fn to_config(&self) -> crate::grpo::GrpoConfig<f64> {
        crate::grpo::GrpoConfig {
            clip_epsilon: self.clip_epsilon,
            kl_coeff: self.kl_coeff,
            entropy_coeff: self.entropy_coeff,
            std_floor: self.std_floor,
            baseline: self.baseline,
        }
    }
}

/// Training hyperparameters copied into exported batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_opt_steps")]
    pub max_steps_opt: u64,
    #[serde(default = "default_four")]
    pub batch_size: usize,
    #[serde(default = "default_four")]
    pub n_rollouts: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_lr() -> f64 {
    5e-6
}
fn default_opt_steps() -> u64 {
    2000
}
fn default_four() -> usize {
    4
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            lr: default_lr(),
            max_steps_opt: default_opt_steps(),
            batch_size: 4,
            n_rollouts: 4,
            temperature: default_temperature(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: Option<RunConfig>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub grounding_metric: Option<GroundingMetric>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub master: Option<EndpointConfig>,
    #[serde(default)]
    pub grounding: Option<EndpointConfig>,
    #[serde(default)]
    pub vision: Option<EndpointConfig>,
    #[serde(default)]
    pub grpo: GrpoSection,
    #[serde(default)]
    pub training: TrainingSection,
}

#[derive(Debug, Error)]
pub enum FileConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: `{key}` {message}")]
    Invalid {
        path: PathBuf,
        key: &'static str,
        message: String,
    },
}

impl FileConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, FileConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| FileConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed: Result<FileConfig, String> =
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str(&text).map_err(|e| e.to_string())
            };
        let cfg = parsed.map_err(|message| FileConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        cfg.check(path)?;
        Ok(cfg)
    }

    fn check(&self, path: &Path) -> Result<(), FileConfigError> {
        let bad = |key, message: &str| {
            Err(FileConfigError::Invalid {
                path: path.to_path_buf(),
                key,
                message: message.to_string(),
            })
        };
        if let Some(run) = &self.run {
            if run.max_steps == 0 {
                return bad("run.max_steps", "must be at least 1");
            }
            if run.window == 0 {
                return bad("run.window", "must be at least 1");
            }
        }
        if self.alpha.is_some_and(|a| !(a >= 0.0 && a.is_finite())) {
            return bad("alpha", "must be a finite non-negative number");
        }
        if self.parallelism == Some(0) {
            return bad("parallelism", "must be at least 1");
        }
        if self.grpo.clip_epsilon.is_nan() || self.grpo.clip_epsilon <= 0.0 {
            return bad("grpo.clip_epsilon", "must be positive");
        }
        if self.grpo.kl_coeff.is_nan() || self.grpo.kl_coeff < 0.0 {
            return bad("grpo.kl_coeff", "must be non-negative");
        }
        if self.training.n_rollouts < 2 {
            return bad("training.n_rollouts", "must be at least 2");
        }
        Ok(())
    }

    pub fn batch_metadata(&self, alpha: f64) -> BatchMetadata {
        BatchMetadata {
            lr: self.training.lr,
            max_steps_opt: self.training.max_steps_opt,
            kl_coeff: self.grpo.kl_coeff,
            batch_size: self.training.batch_size,
            n_rollouts: self.training.n_rollouts,
            temperature: self.training.temperature,
            clip_epsilon: self.grpo.clip_epsilon,
            entropy_coeff: self.grpo.entropy_coeff,
            std_floor: self.grpo.std_floor,
            alpha,
        }
    }
}
