//! Run configuration file: one structured TOML or JSON document whose
//! values seed the command-line defaults. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub train: TrainSection,
    pub preprocess: PreprocessSection,
    pub paths: PathsSection,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// "desk" or "paper"; `schedule` wins when both are given.
    pub preset: Option<String>,
    pub schedule: Option<Vec<usize>>,
    pub no_skips: Option<bool>,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    /// "bce_with_logits" or "soft_dice".
    pub loss: Option<String>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
    pub shuffle: Option<bool>,
    /// "f32" or "f64".
    pub precision: Option<String>,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub target: Option<[usize; 3]>,
    pub margin: Option<usize>,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl RunConfig {
    /// Parses TOML or JSON, deciding by extension with a JSON fallback
    /// for extensionless files.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("json")
        ) || body.trim_start().starts_with('{');
        if is_json {
            serde_json::from_str(&body)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
        } else {
            toml::from_str(&body)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
        }
    }
}
