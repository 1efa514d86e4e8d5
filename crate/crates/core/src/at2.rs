//! Attribution with attention: scores are a learned linear function of
//! per-head attention features, with head coefficients fit once across a
//! dataset to predict the effect of random ablations.

use std::borrow::Cow;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{ablation_stream, eval_f, logit_from_logprob, sample_ablations};
use crate::backend::AttributableModel;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::toy::MaskMode;
use crate::types::{AblationVector, AttnFeatures, AttributionScores, Example, HeadCoefficients};

/// Norm below which a centered vector is treated as constant.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr * (1 + cos(pi * step / steps)) / 2`, reaching zero at `steps`.
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub m_ablations_per_example: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m_ablations_per_example: 32,
            steps: 1000,
            batch_size: 512,
            lr: 0.001,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mask_mode: MaskMode::PreSoftmaxNegInf,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_ablations_per_example < 2 {
            return Err(Error::InvalidConfig(
                "at least two ablations per example are needed for a correlation loss".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine => {
                self.lr * (1.0 + (PI * step as f64 / self.steps as f64).cos()) / 2.0
            }
            Schedule::Constant => self.lr,
        }
    }
}

fn check_shape(theta: &HeadCoefficients, features: &AttnFeatures) -> Result<()> {
    if theta.n_layers != features.n_layers() || theta.n_heads != features.n_heads() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients are {} x {} but features are {} x {}",
            theta.n_layers,
            theta.n_heads,
            features.n_layers(),
            features.n_heads()
        )));
    }
    Ok(())
}

/// `tau_i = sum_{l,h} theta[l,h] * features[i,l,h]`.
pub fn score(theta: &HeadCoefficients, features: &AttnFeatures) -> Result<AttributionScores> {
    check_shape(theta, features)?;
    Ok(AttributionScores(
        (0..features.n_sources())
            .map(|i| {
                theta
                    .theta
                    .iter()
                    .zip(features.source(i))
                    .map(|(t, &f)| t * f as f64)
                    .sum()
            })
            .collect(),
    ))
}

/// `sum_i v_i * features_i`, the per-ablation feature vector over heads.
pub fn reduced_features(features: &AttnFeatures, v: &AblationVector) -> Result<Vec<f64>> {
    if v.len() != features.n_sources() {
        return Err(Error::LengthMismatch {
            expected: features.n_sources(),
            got: v.len(),
        });
    }
    let mut g = vec![0.0; features.heads_per_source()];
    for i in (0..v.len()).filter(|&i| v.is_kept(i)) {
        for (acc, &f) in g.iter_mut().zip(features.source(i)) {
            *acc += f as f64;
        }
    }
    Ok(g)
}

/// Surrogate prediction `<score(theta, features), v>`, computed as
/// `<theta, sum_i v_i features_i>`.
pub fn predicted_effect(
    theta: &HeadCoefficients,
    features: &AttnFeatures,
    v: &AblationVector,
) -> Result<f64> {
    check_shape(theta, features)?;
    let g = reduced_features(features, v)?;
    Ok(theta.theta.iter().zip(&g).map(|(t, g)| t * g).sum())
}

/// Negative Pearson correlation between `preds` and `targets`, and its
/// gradient with respect to `preds`. If either input has (near) zero
/// variance the loss and gradient are both zero.
pub fn pearson_loss(preds: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = preds.len();
    if m < 2 || targets.len() != m {
        return Err(Error::InvalidInput(format!(
            "pearson loss needs two equal-length vectors of length >= 2 (got {m} and {})",
            targets.len()
        )));
    }
    let mf = m as f64;
    let pm = preds.iter().sum::<f64>() / mf;
    let tm = targets.iter().sum::<f64>() / mf;
    let pc: Vec<f64> = preds.iter().map(|p| p - pm).collect();
    let tc: Vec<f64> = targets.iter().map(|t| t - tm).collect();
    let pn = pc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tn = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if pn < DEGENERATE_NORM || tn < DEGENERATE_NORM {
        return Ok((0.0, vec![0.0; m]));
    }
    let rho = pc.iter().zip(&tc).map(|(a, b)| a * b).sum::<f64>() / (pn * tn);
    let grad: Vec<f64> = pc
        .iter()
        .zip(&tc)
        .map(|(p, t)| -(t / tn - rho * p / pn) / pn)
        .collect();
    // Both terms are centered already; re-center to remove rounding drift.
    let gm = grad.iter().sum::<f64>() / mf;
    Ok((-rho, grad.into_iter().map(|g| g - gm).collect()))
}

/// Phase-one cache for one (example, target) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedTarget {
    pub example: usize,
    pub target: usize,
    pub features: AttnFeatures,
    pub ablations: Vec<AblationVector>,
    pub logprobs: Vec<f64>,
    pub logits: Vec<f64>,
    /// `sum_i v_i features_i` for every ablation, `[m, L*H]`.
    pub reduced: Vec<Vec<f64>>,
}

/// Queries the backend for one (example, target) pair: features, the
/// planned ablations and their logit-scaled outcomes.
pub fn collect_target(
    backend: &dyn AttributableModel,
    dataset: &[Example],
    example: usize,
    target: usize,
    config: &TrainConfig,
) -> Result<CachedTarget> {
    let ex = &dataset[example];
    let features = backend.aggregated_attention(ex, target)?;
    let ablations = sample_ablations(
        ex.n_sources(),
        config.m_ablations_per_example,
        ablation_stream(config.seed, &ex.id, target),
    );
    let logprobs = ablations
        .iter()
        .map(|v| eval_f(backend, ex, target, v))
        .collect::<Result<Vec<_>>>()?;
    let logits = logprobs
        .iter()
        .map(|&l| logit_from_logprob(l))
        .collect::<Result<Vec<_>>>()?;
    let reduced = ablations
        .iter()
        .map(|v| reduced_features(&features, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(CachedTarget {
        example,
        target,
        features,
        ablations,
        logprobs,
        logits,
        reduced,
    })
}

/// Where phase two reads its per-(example, target) data from.
pub trait TargetSource: Sync {
    fn n_examples(&self) -> usize;
    fn n_targets(&self, example: usize) -> usize;
    fn get(&self, example: usize, target: usize) -> Result<Cow<'_, CachedTarget>>;
}

/// Phase-one results laid out by example and target.
#[derive(Debug, Clone)]
pub struct TrainCache {
    pub targets: Vec<Vec<CachedTarget>>,
}

impl TrainCache {
    pub fn build(
        backend: &dyn AttributableModel,
        dataset: &[Example],
        config: &TrainConfig,
    ) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = dataset
            .iter()
            .enumerate()
            .flat_map(|(i, ex)| (0..ex.targets.len()).map(move |t| (i, t)))
            .collect();
        let flat = pairs
            .par_iter()
            .map(|&(i, t)| collect_target(backend, dataset, i, t, config))
            .collect::<Result<Vec<_>>>()?;
        let mut targets: Vec<Vec<CachedTarget>> = dataset.iter().map(|_| Vec::new()).collect();
        for c in flat {
            targets[c.example].push(c);
        }
        Ok(TrainCache { targets })
    }
}

impl TargetSource for TrainCache {
    fn n_examples(&self) -> usize {
        self.targets.len()
    }

    fn n_targets(&self, example: usize) -> usize {
        self.targets[example].len()
    }

    fn get(&self, example: usize, target: usize) -> Result<Cow<'_, CachedTarget>> {
        Ok(Cow::Borrowed(&self.targets[example][target]))
    }
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub theta: HeadCoefficients,
    pub loss_curve: Vec<f64>,
    pub cache: TrainCache,
}

/// Learns head coefficients from `dataset` (phase one queries the backend,
/// phase two only touches the cache).
pub fn train_at2(
    dataset: &[Example],
    backend: &dyn AttributableModel,
    config: &TrainConfig,
) -> Result<TrainArtifacts> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let info = backend.info();
    let cache = TrainCache::build(backend, dataset, config)?;
    let (theta, loss_curve) = optimize(&cache, info.n_layers, info.n_heads, config)?;
    Ok(TrainArtifacts {
        theta,
        loss_curve,
        cache,
    })
}

/// Phase two: Adam on the mean per-example negative Pearson loss.
///
/// At every step a batch of `min(batch_size, n)` examples is drawn
/// uniformly with replacement, and one target per drawn example is chosen
/// uniformly. Both draws are counter-based on `(seed, step, slot)`.
pub fn optimize(
    source: &dyn TargetSource,
    n_layers: usize,
    n_heads: usize,
    config: &TrainConfig,
) -> Result<(HeadCoefficients, Vec<f64>)> {
    config.validate()?;
    let n = source.n_examples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = n_layers * n_heads;
    let mut theta = HeadCoefficients::uniform(n_layers, n_heads);
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let batch = config.batch_size.min(n);
    let batch_key = StreamKey::new(config.seed).derive(domain::BATCH);
    let target_key = StreamKey::new(config.seed).derive(domain::TARGET_CHOICE);
    let mut loss_curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let bk = batch_key.derive(step as u64);
        let tk = target_key.derive(step as u64);
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|slot| {
                let ex = bk.index_at(slot as u64, n);
                let nt = source.n_targets(ex);
                (ex, tk.index_at(slot as u64, nt.max(1)))
            })
            .collect();
        let per_example = picks
            .par_iter()
            .map(|&(ex, t)| {
                let cached = source.get(ex, t)?;
                let preds: Vec<f64> = cached
                    .reduced
                    .iter()
                    .map(|g| theta.theta.iter().zip(g).map(|(a, b)| a * b).sum())
                    .collect();
                let (loss, dpred) = pearson_loss(&preds, &cached.logits)?;
                let mut grad = vec![0.0; dim];
                for (g, d) in cached.reduced.iter().zip(&dpred) {
                    for (acc, gv) in grad.iter_mut().zip(g) {
                        *acc += d * gv;
                    }
                }
                Ok((loss, grad))
            })
            .collect::<Result<Vec<_>>>()?;

        let scale = 1.0 / batch as f64;
        let mut grad = vec![0.0; dim];
        let mut loss = 0.0;
        for (l, g) in &per_example {
            loss += l * scale;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
        loss_curve.push(loss);

        let lr = config.lr_at(step);
        let t = (step + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for k in 0..dim {
            m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * grad[k];
            m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * grad[k] * grad[k];
            let mhat = m1[k] / c1;
            let vhat = m2[k] / c2;
            theta.theta[k] -= lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
    Ok((theta, loss_curve))
}

/// Persisted form of learned coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaDocument {
    pub version: u32,
    #[serde(rename = "L")]
    pub n_layers: usize,
    #[serde(rename = "H")]
    pub n_heads: usize,
    /// Row-major `[L, H]`.
    pub theta: Vec<f64>,
    pub train_config: TrainConfig,
    pub mask_mode: MaskMode,
}

impl ThetaDocument {
    pub const VERSION: u32 = 1;

    pub fn new(theta: &HeadCoefficients, config: &TrainConfig) -> Self {
        ThetaDocument {
            version: Self::VERSION,
            n_layers: theta.n_layers,
            n_heads: theta.n_heads,
            theta: theta.theta.clone(),
            train_config: config.clone(),
            mask_mode: config.mask_mode,
        }
    }

    pub fn coefficients(&self) -> Result<HeadCoefficients> {
        if self.version != Self::VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported theta document version {}",
                self.version
            )));
        }
        HeadCoefficients::new(self.n_layers, self.n_heads, self.theta.clone())
    }

    /// Canonical JSON: sorted keys, shortest round-trip float formatting.
    pub fn to_canonical_json(&self) -> String {
        crate::trace::canonical_json(self)
    }
}

/// `layer,head,value` rows for coefficient inspection.
pub fn coefficients_csv(theta: &HeadCoefficients) -> String {
    let mut out = String::from("layer,head,value\n");
    for l in 0..theta.n_layers {
        for h in 0..theta.n_heads {
            out.push_str(&format!("{l},{h},{}\n", theta.get(l, h)));
        }
    }
    out
}

#[cfg(test)]
mod tests;
