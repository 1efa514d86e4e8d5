//! Dataset directories written by `gen-data`.
//!
//! `dataset.json` holds the generator settings and the examples; planted
//! datasets also get `truth.json`, mapping each id to its ground truth.
//! The backend is rebuilt from the stored settings on every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use at2_core::backend::{planted_generate, PlantedBackend, PlantedConfig, PlantedTruth};
use at2_core::toy::{toy_generate, MaskMode, ToyBackend, ToyConfig, ToyDataConfig, ToyModel};
use at2_core::trace::{canonical_json, read_trace, write_atomic};
use at2_core::{AttributableModel, Error, Example};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATASET_FILE: &str = "dataset.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Planted {
        config: PlantedConfig,
    },
    Toy {
        model: ToyConfig,
        data: ToyDataConfig,
        mask_mode: MaskMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format_version: u32,
    pub generator: Generator,
    pub examples: Vec<Example>,
}

impl DatasetFile {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(DATASET_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(DATASET_FILE), canonical_json(self).as_bytes())?;
        Ok(())
    }

    pub fn example(&self, id: &str) -> Result<&Example, CliError> {
        Ok(self
            .examples
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::UnknownExample(id.to_string()))?)
    }

    /// The live backend the examples were generated with.
    pub fn live_backend(&self) -> Result<Box<dyn AttributableModel>, CliError> {
        match &self.generator {
            Generator::Planted { config } => {
                let samples = planted_generate(config, self.examples.len())?;
                Ok(Box::new(PlantedBackend::new(config.clone(), &samples)?))
            }
            Generator::Toy {
                model, mask_mode, ..
            } => Ok(Box::new(ToyBackend::new(ToyModel::new(model.clone())?, *mask_mode))),
        }
    }

    /// `live` or `trace:DIR`.
    pub fn backend(&self, spec: &str) -> Result<Box<dyn AttributableModel>, CliError> {
        match spec {
            "live" => self.live_backend(),
            "planted" | "toy" => {
                let kind = match self.generator {
                    Generator::Planted { .. } => "planted",
                    Generator::Toy { .. } => "toy",
                };
                if kind != spec {
                    return Err(CliError::Usage(format!(
                        "--backend {spec} but the dataset was generated by the {kind} backend"
                    )));
                }
                self.live_backend()
            }
            _ => match spec.strip_prefix("trace:") {
                Some(dir) => Ok(Box::new(read_trace(&PathBuf::from(dir))?)),
                None => Err(CliError::Usage(format!(
                    "--backend must be live, toy, planted or trace:DIR, got {spec:?}"
                ))),
            },
        }
    }
}

/// Generates a planted dataset; the second value is the truth sidecar.
pub fn generate_planted(
    config: &PlantedConfig,
    n: usize,
) -> Result<(DatasetFile, BTreeMap<String, PlantedTruth>), CliError> {
    let samples = planted_generate(config, n)?;
    let truth = samples
        .iter()
        .map(|s| (s.example.id.clone(), s.truth.clone()))
        .collect();
    let file = DatasetFile {
        format_version: 1,
        generator: Generator::Planted {
            config: config.clone(),
        },
        examples: samples.into_iter().map(|s| s.example).collect(),
    };
    Ok((file, truth))
}

pub fn generate_toy(
    model: &ToyConfig,
    data: &ToyDataConfig,
    mask_mode: MaskMode,
    n: usize,
) -> Result<DatasetFile, CliError> {
    let m = ToyModel::new(model.clone())?;
    Ok(DatasetFile {
        format_version: 1,
        generator: Generator::Toy {
            model: model.clone(),
            data: data.clone(),
            mask_mode,
        },
        examples: toy_generate(&m, data, n)?,
    })
}

pub fn write_truth(dir: &Path, truth: &BTreeMap<String, PlantedTruth>) -> Result<(), CliError> {
    write_atomic(&dir.join(TRUTH_FILE), canonical_json(truth).as_bytes())?;
    Ok(())
}
