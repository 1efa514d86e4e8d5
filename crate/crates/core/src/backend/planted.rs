//! A synthetic backend with known per-source effects.
//!
//! Each example has `n_sources` single-token sources and one target. A
//! hidden non-negative effect vector `tau_star` drives the outcome:
//!
//! ```text
//! log f(v) = log sigmoid(b0 + sum_i tau_star[i] * v[i] + eps(example, v))
//! ```
//!
//! where `eps ~ N(0, noise_sigma^2)` is a deterministic function of the
//! example id and the bits of `v`. Attention features are Dirichlet rows,
//! except at the planted heads whose row mixes `tau_star / sum(tau_star)`
//! with Dirichlet noise according to the head's fidelity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{AttributableModel, ModelInfo};
use crate::error::{Error, Result};
use crate::rng::{domain, fnv1a, Stream, StreamKey};
use crate::types::{AblationVector, AttnFeatures, Example, SourceSet, Span, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub planted_heads: Vec<PlantedHead>,
    pub k_true: usize,
    pub n_sources: usize,
    pub noise_sigma: f64,
    pub b0: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_layers: 4,
            n_heads: 4,
            planted_heads: vec![PlantedHead {
                layer: 2,
                head: 1,
                fidelity: 1.0,
            }],
            k_true: 4,
            n_sources: 12,
            noise_sigma: 0.0,
            b0: 0.0,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("planted backend needs at least one layer and head".into());
        }
        if self.n_sources == 0 {
            return bad("n_sources must be >= 1".into());
        }
        if self.k_true > self.n_sources {
            return bad(format!(
                "k_true {} exceeds n_sources {}",
                self.k_true, self.n_sources
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !self.b0.is_finite() {
            return bad("b0 must be finite".into());
        }
        for p in &self.planted_heads {
            if p.layer >= self.n_layers || p.head >= self.n_heads {
                return bad(format!(
                    "planted head ({}, {}) outside {} x {}",
                    p.layer, p.head, self.n_layers, self.n_heads
                ));
            }
            if !(0.0..=1.0).contains(&p.fidelity) {
                return bad(format!("fidelity {} outside [0, 1]", p.fidelity));
            }
        }
        Ok(())
    }

    pub fn model_info(&self) -> ModelInfo {
        ModelInfo {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab_size: self.n_sources + 1,
            max_seq: self.n_sources + 1,
        }
    }
}

/// Ground-truth effects of one planted example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub tau_star: Vec<f64>,
    pub b0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSample {
    pub example: Example,
    pub truth: PlantedTruth,
    pub features: AttnFeatures,
}

/// `log(1 / (1 + e^-z))` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn dirichlet_row(stream: &mut Stream, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| stream.exponential()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Generates `n` planted examples. Example `i` depends only on `(seed, i)`.
pub fn planted_generate(config: &PlantedConfig, n: usize) -> Result<Vec<PlantedSample>> {
    config.validate()?;
    let base = StreamKey::new(config.seed).derive(domain::PLANTED);
    (0..n).map(|i| planted_sample(config, base.derive(i as u64), i)).collect()
}

fn planted_sample(config: &PlantedConfig, key: StreamKey, index: usize) -> Result<PlantedSample> {
    let s = config.n_sources;
    let mut stream = key.stream();

    let mut tau_star = vec![0.0; s];
    for i in stream.choose(s, config.k_true) {
        tau_star[i] = stream.exponential();
    }
    let total: f64 = tau_star.iter().sum();

    let (l_count, h_count) = (config.n_layers, config.n_heads);
    let mut values = vec![0.0f32; s * l_count * h_count];
    for layer in 0..l_count {
        for head in 0..h_count {
            let noise = dirichlet_row(&mut stream, s);
            let planted = config
                .planted_heads
                .iter()
                .find(|p| p.layer == layer && p.head == head);
            let row: Vec<f64> = match planted {
                Some(p) if total > 0.0 => tau_star
                    .iter()
                    .zip(&noise)
                    .map(|(t, d)| p.fidelity * (t / total) + (1.0 - p.fidelity) * d)
                    .collect(),
                _ => noise,
            };
            for (src, val) in row.into_iter().enumerate() {
                values[(src * l_count + layer) * h_count + head] = val as f32;
            }
        }
    }

    let example = Example {
        id: format!("planted-{index}"),
        x: TokenSeq((0..s as u32).collect()),
        sources: SourceSet((0..s).map(|i| Span::new(i, i + 1)).collect()),
        y: TokenSeq(vec![s as u32]),
        targets: vec![Span::new(0, 1)],
        text: None,
    };
    Ok(PlantedSample {
        example,
        truth: PlantedTruth {
            tau_star,
            b0: config.b0,
        },
        features: AttnFeatures::new(s, l_count, h_count, values)?,
    })
}

/// Backend answering contract queries from planted samples, keyed by example id.
#[derive(Debug, Clone)]
pub struct PlantedBackend {
    config: PlantedConfig,
    entries: HashMap<String, (PlantedTruth, AttnFeatures)>,
}

impl PlantedBackend {
    pub fn new(config: PlantedConfig, samples: &[PlantedSample]) -> Result<Self> {
        config.validate()?;
        let entries = samples
            .iter()
            .map(|s| (s.example.id.clone(), (s.truth.clone(), s.features.clone())))
            .collect();
        Ok(PlantedBackend { config, entries })
    }

    pub fn config(&self) -> &PlantedConfig {
        &self.config
    }

    pub fn truth(&self, id: &str) -> Option<&PlantedTruth> {
        self.entries.get(id).map(|(t, _)| t)
    }

    fn entry(&self, example: &Example, target: usize) -> Result<&(PlantedTruth, AttnFeatures)> {
        example.target(target)?;
        let entry = self
            .entries
            .get(&example.id)
            .ok_or_else(|| Error::UnknownExample(example.id.clone()))?;
        if entry.0.tau_star.len() != example.n_sources() {
            return Err(Error::LengthMismatch {
                expected: entry.0.tau_star.len(),
                got: example.n_sources(),
            });
        }
        Ok(entry)
    }

    fn noise(&self, id: &str, target: usize, v: &AblationVector) -> f64 {
        if self.config.noise_sigma == 0.0 {
            return 0.0;
        }
        let key = StreamKey::new(self.config.seed)
            .derive(domain::PLANTED_NOISE)
            .derive_str(id)
            .derive(target as u64)
            .derive(fnv1a(v.to_bitstring().as_bytes()));
        self.config.noise_sigma * key.gaussian_at(0)
    }
}

impl AttributableModel for PlantedBackend {
    fn name(&self) -> &'static str {
        "planted"
    }

    fn info(&self) -> ModelInfo {
        self.config.model_info()
    }

    fn logprob_under_ablation(
        &self,
        example: &Example,
        target: usize,
        v: &AblationVector,
    ) -> Result<f64> {
        let (truth, _) = self.entry(example, target)?;
        if v.len() != truth.tau_star.len() {
            return Err(Error::LengthMismatch {
                expected: truth.tau_star.len(),
                got: v.len(),
            });
        }
        let signal: f64 = truth
            .tau_star
            .iter()
            .zip(v.bits())
            .map(|(t, &kept)| if kept { *t } else { 0.0 })
            .sum();
        Ok(log_sigmoid(truth.b0 + signal + self.noise(&example.id, target, v)))
    }

    fn aggregated_attention(&self, example: &Example, target: usize) -> Result<AttnFeatures> {
        Ok(self.entry(example, target)?.1.clone())
    }
}
