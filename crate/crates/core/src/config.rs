//! Run configuration: one TOML file with `[gen]`, `[gen.proportions]`,
//! `[align]`, `[model]` and `[train]` sections. Every section is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::AlignParams;
use crate::detector::ModelConfig;
use crate::simulate::GenConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gen: GenConfig,
    pub align: AlignParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            ConfigError::Parse {
                line,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Replaces both the generation and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, reason: String| ConfigError::Invalid {
            field: field.to_string(),
            reason,
        };
        self.gen.validate().map_err(|e| invalid("gen", e.to_string()))?;
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        if !(self.align.peak > 0.0 && self.align.noise_sigma >= 0.0) {
            return Err(invalid("align", "peak must be positive and noise_sigma non-negative".into()));
        }
        if self.gen.max_ref_tokens > self.model.c_max {
            return Err(invalid(
                "gen.max_ref_tokens",
                format!("{} exceeds model.c_max {}", self.gen.max_ref_tokens, self.model.c_max),
            ));
        }
        if self.gen.max_frames > self.model.t_max {
            return Err(invalid(
                "gen.max_frames",
                format!("{} exceeds model.t_max {}", self.gen.max_frames, self.model.t_max),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
