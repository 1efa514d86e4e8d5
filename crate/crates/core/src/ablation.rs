//! Ablation sampling, the ablation-vector to attention-mask mapping, and
//! the log-space logit transform used as the regression target.

use serde::{Deserialize, Serialize};

use crate::backend::AttributableModel;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::types::{AblationVector, Example, SourceSpan};

/// Log-probabilities above this are clamped before the logit transform.
pub const LOGPROB_CLAMP: f64 = -1e-9;

/// Below this the `log1p(-exp(L))` correction is under one ulp of `L`.
pub const LOGIT_TAIL: f64 = -37.0;

/// `m` vectors whose bit `i` of vector `j` is a fair coin keyed by `(key, j, i)`.
pub fn sample_ablations(n_sources: usize, m: usize, key: StreamKey) -> Vec<AblationVector> {
    (0..m)
        .map(|j| {
            let row = key.derive(j as u64);
            AblationVector((0..n_sources).map(|i| row.bit_at(i as u64)).collect())
        })
        .collect()
}

/// Stream for the ablations of one (example, target) pair. Training, plan
/// files and trace export all derive their vectors from this key.
pub fn ablation_stream(seed: u64, example_id: &str, target: usize) -> StreamKey {
    StreamKey::new(seed)
        .derive(domain::ABLATION)
        .derive_str(example_id)
        .derive(target as u64)
}

/// Per-position keep flags over `X`: false exactly on the tokens of ablated sources.
pub fn keep_mask(x_len: usize, sources: &[SourceSpan], v: &AblationVector) -> Result<Vec<bool>> {
    if v.len() != sources.len() {
        return Err(Error::LengthMismatch {
            expected: sources.len(),
            got: v.len(),
        });
    }
    let mut mask = vec![true; x_len];
    for (span, &kept) in sources.iter().zip(v.bits()) {
        if !kept {
            if span.end > x_len {
                return Err(Error::InvalidInput(format!(
                    "source [{}, {}) exceeds input length {x_len}",
                    span.start, span.end
                )));
            }
            mask[span.range()].iter_mut().for_each(|b| *b = false);
        }
    }
    Ok(mask)
}

/// `log f(v)`: the log-probability of the target span under ablation `v`.
pub fn eval_f(
    backend: &dyn AttributableModel,
    example: &Example,
    target: usize,
    v: &AblationVector,
) -> Result<f64> {
    if v.len() != example.n_sources() {
        return Err(Error::LengthMismatch {
            expected: example.n_sources(),
            got: v.len(),
        });
    }
    backend.logprob_under_ablation(example, target, v)
}

/// `log(p / (1 - p))` computed from `L = log p` without leaving log space.
pub fn logit_from_logprob(logprob: f64) -> Result<f64> {
    if logprob.is_nan() || logprob > 0.0 {
        return Err(Error::DomainError(logprob));
    }
    let l = logprob.min(LOGPROB_CLAMP);
    if l < LOGIT_TAIL {
        return Ok(l);
    }
    // log(1 - e^l), switching formulas at -ln 2 for accuracy.
    let log1m = if l > -std::f64::consts::LN_2 {
        (-l.exp_m1()).ln()
    } else {
        (-l.exp()).ln_1p()
    };
    Ok(l - log1m)
}

/// Explicit ablation vectors for one (example, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub target: usize,
    pub ablations: Vec<AblationVector>,
}

/// The ablations to evaluate for a whole dataset, with the seed that generated them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub seed: u64,
    pub m: usize,
    pub entries: Vec<PlanEntry>,
}

impl AblationPlan {
    pub fn generate(dataset: &[Example], m: usize, seed: u64) -> AblationPlan {
        let entries = dataset
            .iter()
            .flat_map(|ex| {
                (0..ex.targets.len()).map(move |t| PlanEntry {
                    id: ex.id.clone(),
                    target: t,
                    ablations: sample_ablations(ex.n_sources(), m, ablation_stream(seed, &ex.id, t)),
                })
            })
            .collect();
        AblationPlan { seed, m, entries }
    }

    pub fn entry(&self, id: &str, target: usize) -> Option<&PlanEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id && e.target == target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Span;

    #[test]
    fn pinned_sample() {
        // Cross-checked against a separate Python splitmix64 implementation.
        let v = sample_ablations(3, 1, StreamKey::new(42));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_bitstring(), PINNED_BITS);
        assert_eq!(sample_ablations(3, 1, StreamKey::new(42)), v);
    }

    const PINNED_BITS: &str = "011";

    #[test]
    fn keep_rate_is_one_half() {
        let vs = sample_ablations(8, 10_000, StreamKey::new(9));
        for i in 0..8 {
            let kept = vs.iter().filter(|v| v.is_kept(i)).count() as f64 / 10_000.0;
            assert!((kept - 0.5).abs() < 0.02, "bit {i}: {kept}");
        }
    }

    #[test]
    fn distinct_keys_give_distinct_vectors() {
        let a = sample_ablations(8, 8, StreamKey::new(1));
        let b = sample_ablations(8, 8, StreamKey::new(2));
        assert_ne!(a, b);
    }

    #[test]
    fn prefix_stability() {
        // Vector j depends only on (key, j): asking for more keeps the prefix.
        let a = sample_ablations(5, 4, StreamKey::new(3));
        let b = sample_ablations(5, 10, StreamKey::new(3));
        assert_eq!(a[..], b[..4]);
    }

    #[test]
    fn keep_mask_cases() {
        let spans = [Span::new(0, 2), Span::new(4, 5)];
        let m = keep_mask(6, &spans, &AblationVector(vec![false, true])).unwrap();
        assert_eq!(m, vec![false, false, true, true, true, true]);
        let m = keep_mask(6, &spans, &AblationVector::all_kept(2)).unwrap();
        assert!(m.iter().all(|&b| b));
        let cover = [Span::new(0, 3), Span::new(3, 6)];
        let m = keep_mask(6, &cover, &AblationVector::all_ablated(2)).unwrap();
        assert!(m.iter().all(|&b| !b));
        assert!(matches!(
            keep_mask(6, &spans, &AblationVector::all_kept(3)),
            Err(Error::LengthMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn logit_values() {
        assert_eq!(logit_from_logprob(0.5f64.ln()).unwrap(), 0.0);
        // -1 - ln(1 - e^-1), evaluated to 20 digits offline: -0.54132485461291810898
        let v = logit_from_logprob(-1.0).unwrap();
        assert!((v - (-0.541_324_854_612_918_1)).abs() < 1e-15, "{v}");
        let v = logit_from_logprob(-50.0).unwrap();
        assert!((v + 50.0).abs() <= 50.0 * 1e-12);
        assert!(logit_from_logprob(0.0).unwrap().is_finite());
        assert!(matches!(logit_from_logprob(1e-3), Err(Error::DomainError(_))));
        assert!(logit_from_logprob(f64::NAN).is_err());
    }

    #[test]
    fn logit_antisymmetry() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let a = logit_from_logprob(p.ln()).unwrap();
            let b = logit_from_logprob((1.0 - p).ln()).unwrap();
            assert!((a + b).abs() < 1e-10, "p={p}: {a} {b}");
        }
    }

    #[test]
    fn logit_monotone() {
        let mut prev = f64::NEG_INFINITY;
        let mut l = -60.0;
        while l < -1e-9 {
            let v = logit_from_logprob(l).unwrap();
            assert!(v > prev, "not increasing at {l}");
            prev = v;
            l += 0.013;
        }
    }
}
