//! The attributable-model contract and the planted-ground-truth backend.

mod planted;

pub use planted::{
    log_sigmoid, planted_generate, PlantedBackend, PlantedConfig, PlantedHead, PlantedSample,
    PlantedTruth,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AblationVector, AttnFeatures, Example};

/// Shape and limits of an attributable model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelInfo {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::InvalidConfig(format!(
                "model info fields must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A model that can be queried for ablation outcomes and attention features.
///
/// Implementations are read-only after construction and must give
/// bit-identical answers to repeated identical queries.
pub trait AttributableModel: Send + Sync {
    /// Short backend name used in error messages.
    fn name(&self) -> &'static str;

    fn info(&self) -> ModelInfo;

    /// Natural-log probability of target span `target` with the sources
    /// flagged `false` in `v` ablated.
    fn logprob_under_ablation(
        &self,
        example: &Example,
        target: usize,
        v: &AblationVector,
    ) -> Result<f64>;

    /// Attention from the target span onto each source, per layer and head,
    /// measured without any ablation.
    fn aggregated_attention(&self, example: &Example, target: usize) -> Result<AttnFeatures>;

    /// Per-token l1 norm of the gradient of the target log-probability with
    /// respect to each input token embedding.
    fn input_grad_l1(&self, _example: &Example, _target: usize) -> Result<Vec<f64>> {
        Err(Error::BackendUnsupported(format!(
            "the {} backend exposes no input embeddings; gradient attribution needs the toy model",
            self.name()
        )))
    }

    /// Ablations the backend has stored outcomes for, if it only answers those.
    fn recorded_ablations(&self, _example: &Example, _target: usize) -> Option<Vec<AblationVector>> {
        None
    }

    /// Whether the backend can score examples whose input was physically shortened.
    fn supports_token_removal(&self) -> bool {
        false
    }
}
