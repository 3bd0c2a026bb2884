//! Experiment configuration: strict JSON parsing, defaults for every
//! field, and a content hash over the fully resolved config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::advantage::ShapingConfig;
use crate::env::EnvConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n_eval: usize,
    pub sweep: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_eval: 10_000,
            sweep: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LogSettings {
    /// Buckets whose center falls below this are labeled "easy" in step
    /// logs. Defaults to phi_low when absent.
    pub easy_below: Option<f64>,
}

impl Default for LogSettings {
    fn default() -> Self {
        Self { easy_below: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shaping: ShapingConfig,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub eval: EvalSettings,
    pub log: LogSettings,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.shaping
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.env
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.n_eval < 1 {
            return Err(ConfigError::Invalid("eval.n_eval must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Bucket center threshold for the easy/hard log labels.
    pub fn easy_split(&self) -> f64 {
        self.log.easy_below.unwrap_or(self.shaping.phi_low)
    }

    /// Hex SHA-256 of the resolved config. Computed from the struct, so it
    /// does not depend on key order or formatting in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shaping: ShapingConfig::default(),
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            eval: EvalSettings::default(),
            log: LogSettings::default(),
            output_dir: "runs".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_defaults() -> Self {
        Self::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::with_defaults();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.group_size, 16);
        assert_eq!(cfg.shaping.n_max, 4);
        assert_eq!(cfg.train.clip_low, 0.2);
        assert_eq!(cfg.train.clip_high, 0.28);
        assert_eq!(cfg.train.kl_coeff, 0.0);
    }

    #[test]
    fn unknown_keys_fail_loudly() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"shaping": {{"lambdaa": 1.0}}}}"#).unwrap();
        let err = ExperimentConfig::load(f.path()).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    }

    #[test]
    fn hash_ignores_source_key_order() {
        let a: ExperimentConfig =
            serde_json::from_str(r#"{"shaping": {"beta": 0.9, "eta": 0.0001}}"#).unwrap();
        let b: ExperimentConfig =
            serde_json::from_str(r#"{"shaping": {"eta": 0.0001, "beta": 0.9}}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"shaping": {"eta": 0.0002, "beta": 0.9}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_shaping_rejected_at_load() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"shaping": {{"beta": 1.2, "delta": 0.9}}}}"#).unwrap();
        let err = ExperimentConfig::load(f.path()).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }
}
