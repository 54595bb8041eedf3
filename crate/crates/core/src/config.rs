//! Run configuration read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{BuildError, HyperParams};
use crate::train::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("hparams: {0}")]
    HParams(#[from] BuildError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated on the fly.
    Synthetic {
        train_count: usize,
        eval_count: usize,
        #[serde(default)]
        seed: u64,
    },
    /// NTF files holding `images`, `labels` and `classes`.
    Files { train: PathBuf, eval: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub hparams: HyperParams,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    /// Parses by extension (`.json`, otherwise TOML), resolves dataset
    /// paths relative to the file and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        if let DatasetSpec::Files { train, eval } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, eval] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.hparams.validate()?;
        self.train.validate()?;
        match &self.dataset {
            DatasetSpec::Synthetic {
                train_count,
                eval_count,
                ..
            } => {
                if *train_count < self.train.batch_size || *eval_count == 0 {
                    return Err(ConfigError::Dataset(format!(
                        "train_count {train_count} must cover one batch of {} and eval_count must be positive",
                        self.train.batch_size
                    )));
                }
            }
            DatasetSpec::Files { train, eval } => {
                for p in [train, eval] {
                    if !p.is_file() {
                        return Err(ConfigError::Dataset(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
