//! The `--config` file and `--set` overrides.

use std::path::Path;

use at2_core::at2::TrainConfig;
use at2_core::backend::PlantedConfig;
use at2_core::esm::DEFAULT_LAMBDA;
use at2_core::metrics::{DEFAULT_LDS_M, DEFAULT_TOP_K};
use at2_core::toy::{ToyConfig, ToyDataConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Defaults for `eval`, `attribute` and `prune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalDefaults {
    pub top_k: usize,
    pub lds_m: usize,
    pub esm_m: usize,
    pub esm_lambda: f64,
    pub seed: u64,
}

impl Default for EvalDefaults {
    fn default() -> Self {
        EvalDefaults {
            top_k: DEFAULT_TOP_K,
            lds_m: DEFAULT_LDS_M,
            esm_m: 32,
            esm_lambda: DEFAULT_LAMBDA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Number of examples written by `gen-data`.
    pub n_examples: usize,
    pub planted: PlantedConfig,
    pub toy: ToyConfig,
    pub toy_data: ToyDataConfig,
    pub train: TrainConfig,
    pub eval: EvalDefaults,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            n_examples: 100,
            planted: PlantedConfig::default(),
            toy: ToyConfig::default(),
            toy_data: ToyDataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalDefaults::default(),
        }
    }
}

impl CliConfig {
    /// Reads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| at2_core::Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| at2_core::Error::json(p, e))?
            }
            None => CliConfig::default(),
        };
        for o in overrides {
            config = config.with_override(o)?;
        }
        Ok(config)
    }

    /// Applies one `dotted.key=value` override. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn with_override(&self, assignment: &str) -> Result<Self, CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
        let mut root = serde_json::to_value(self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?,
                Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?,
                _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
            };
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        serde_json::from_value(root)
            .map_err(|e| CliError::Usage(format!("bad value for {key}: {e}")))
    }
}
