//! JSON run configuration with one section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataConfig;
use crate::eval::{ClassifierHyper, DEFAULT_MAX_DOC_TOKENS};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

/// Keys that must be written out explicitly.
pub const REQUIRED_SEEDS: [&str; 3] = ["train.seed", "synth.seed", "eval.classifier.seed"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{key}`: {expected}")]
    Invalid { key: String, expected: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_doc_tokens: usize,
    pub classifier: ClassifierHyper,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            classifier: ClassifierHyper::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
}

fn invalid(key: &str, expected: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        expected: expected.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid("<root>", format!("not valid JSON: {e}")))?;
        for key in REQUIRED_SEEDS {
            let present = key.split('.').try_fold(&value, |v, k| v.get(k)).is_some();
            if !present {
                return Err(invalid(key, "required unsigned integer seed is missing"));
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            invalid(&key, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.loss.validate().map_err(|e| invalid("loss", e))?;
        self.synth.validate().map_err(|e| invalid("synth", e))?;
        if self.eval.max_doc_tokens == 0 {
            return Err(invalid("eval.max_doc_tokens", "must be positive"));
        }
        let c = &self.eval.classifier;
        if c.hidden == 0 || c.batch_size == 0 || c.max_epochs == 0 {
            return Err(invalid("eval.classifier", "hidden, batch_size and max_epochs must be positive"));
        }
        if !(c.lr > 0.0) {
            return Err(invalid("eval.classifier.lr", "must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
