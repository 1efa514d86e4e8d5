//! Deterministic toy transformer backend and its dataset generator.

mod model;

pub use model::{
    aggregate_attention, argmax, ForwardOutput, MaskMode, RawAttention, ToyConfig, ToyModel,
};

use serde::{Deserialize, Serialize};

use crate::ablation::keep_mask;
use crate::backend::{AttributableModel, ModelInfo};
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::types::{AblationVector, AttnFeatures, Example, SourceSet, Span, TokenSeq};

/// Finite-difference step for the gradient baseline.
pub const GRAD_STEP: f64 = 1e-3;

/// The toy model behind the attributable-model contract.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    model: ToyModel,
    mask_mode: MaskMode,
    grad_step: f64,
}

impl ToyBackend {
    pub fn new(model: ToyModel, mask_mode: MaskMode) -> Self {
        ToyBackend {
            model,
            mask_mode,
            grad_step: GRAD_STEP,
        }
    }

    pub fn with_grad_step(mut self, step: f64) -> Self {
        self.grad_step = step;
        self
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    /// Gradient l1 per input token with the given ablation applied as a mask.
    pub fn input_grad_l1_under(
        &self,
        example: &Example,
        target: usize,
        v: &AblationVector,
    ) -> Result<Vec<f64>> {
        let span = example.target(target)?;
        let keep = keep_mask(example.x.len(), example.sources.spans(), v)?;
        self.model.input_grad_l1(
            example.x.as_slice(),
            example.y.as_slice(),
            span,
            &keep,
            self.mask_mode,
            self.grad_step,
        )
    }
}

impl AttributableModel for ToyBackend {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn info(&self) -> ModelInfo {
        let c = self.model.config();
        ModelInfo {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
        }
    }

    fn logprob_under_ablation(
        &self,
        example: &Example,
        target: usize,
        v: &AblationVector,
    ) -> Result<f64> {
        let span = example.target(target)?;
        let keep = keep_mask(example.x.len(), example.sources.spans(), v)?;
        self.model.target_logprob(
            example.x.as_slice(),
            example.y.as_slice(),
            span,
            &keep,
            self.mask_mode,
        )
    }

    fn aggregated_attention(&self, example: &Example, target: usize) -> Result<AttnFeatures> {
        let span = example.target(target)?;
        let raw = self
            .model
            .target_attention(example.x.as_slice(), example.y.as_slice(), span)?;
        aggregate_attention(&raw, example.x.len(), span, example.sources.spans())
    }

    fn input_grad_l1(&self, example: &Example, target: usize) -> Result<Vec<f64>> {
        self.input_grad_l1_under(example, target, &AblationVector::all_kept(example.n_sources()))
    }

    fn supports_token_removal(&self) -> bool {
        true
    }
}

/// Shape of generated toy examples.
///
/// The input is `n_sources` random-token spans (lengths uniform in
/// `[span_len_min, span_len_max]`) followed by `query_len` tokens that
/// belong to no source. The continuation is `n_new` greedy tokens, split
/// into consecutive targets of `target_len` tokens (the last may be shorter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub n_sources: usize,
    pub span_len_min: usize,
    pub span_len_max: usize,
    pub query_len: usize,
    pub n_new: usize,
    pub target_len: usize,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            n_sources: 8,
            span_len_min: 2,
            span_len_max: 4,
            query_len: 2,
            n_new: 6,
            target_len: 3,
            seed: 0,
        }
    }
}

impl ToyDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0
            || self.span_len_min == 0
            || self.span_len_min > self.span_len_max
            || self.n_new == 0
            || self.target_len == 0
        {
            return Err(Error::InvalidConfig(format!("invalid toy data config: {self:?}")));
        }
        Ok(())
    }
}

/// Generates `n` examples whose continuations are the model's greedy output.
/// Example `i` depends only on `(config.seed, i)` and the model.
pub fn toy_generate(model: &ToyModel, config: &ToyDataConfig, n: usize) -> Result<Vec<Example>> {
    use rayon::prelude::*;
    config.validate()?;
    let base = StreamKey::new(config.seed).derive(domain::TOY_DATA);
    let vocab = model.config().vocab_size;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = base.derive(i as u64).stream();
            let mut x = Vec::new();
            let mut spans = Vec::with_capacity(config.n_sources);
            for _ in 0..config.n_sources {
                let len = config.span_len_min
                    + stream.index(config.span_len_max - config.span_len_min + 1);
                let start = x.len();
                x.extend((0..len).map(|_| stream.index(vocab) as u32));
                spans.push(Span::new(start, x.len()));
            }
            x.extend((0..config.query_len).map(|_| stream.index(vocab) as u32));
            let full = model.generate_greedy(&x, config.n_new)?;
            let y = full[x.len()..].to_vec();
            let targets = (0..config.n_new)
                .step_by(config.target_len)
                .map(|s| Span::new(s, (s + config.target_len).min(config.n_new)))
                .collect();
            Ok(Example {
                id: format!("toy-{i}"),
                x: TokenSeq(x),
                sources: SourceSet(spans),
                y: TokenSeq(y),
                targets,
                text: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
