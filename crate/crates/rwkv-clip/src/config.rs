//! Run configuration file: model, optimizer and dataset sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use rwkv_clip_core::model::ModelConfig;
use rwkv_clip_core::optim::TrainConfig;

use crate::error::{Error, Result};

/// Where training records come from. With no `path`, a toy corpus of
/// `toy_records` is generated from `toy_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<String>,
    pub toy_records: usize,
    pub toy_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            toy_records: 512,
            toy_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // serde_json messages already end in "at line L column C"
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_partial_files_fill_in() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_json()).unwrap(), d);
        let c = RunConfig::parse(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_and_syntax_errors_are_rejected_with_lines() {
        let e = RunConfig::parse("{\n  \"train\": {\n    \"epocs\": 3\n  }\n}").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("epocs"), "{e}");
        let e = RunConfig::parse("{\n\n  \"train\": ,\n}").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        assert!(RunConfig::parse(r#"{"train": {"batch_size": 1}}"#).is_err());
    }
}
