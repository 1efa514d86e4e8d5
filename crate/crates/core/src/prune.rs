//! Context pruning: keep only the highest-scoring sources and measure the
//! target's log-probability on the shortened input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::AttributableModel;
use crate::error::{Error, Result};
use crate::methods::NamedMethod;
use crate::metrics::mean_stderr;
use crate::rng::{domain, StreamKey};
use crate::types::{AblationVector, AttributionScores, Example, SourceSet, Span, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// Retained source indices, in original order.
    pub kept: Vec<usize>,
    pub example: Example,
}

/// Rebuilds `example` with only the sources in `kept` (any order) and all
/// non-source tokens, concatenated in original order with spans re-indexed.
/// Text annotations are dropped since their offsets no longer apply.
pub fn prune_to(example: &Example, kept: &[usize]) -> Result<PruneResult> {
    let n = example.n_sources();
    let mut keep_source = vec![false; n];
    for &i in kept {
        if i >= n {
            return Err(Error::InvalidInput(format!("source index {i} out of range ({n})")));
        }
        keep_source[i] = true;
    }
    let mut drop_token = vec![false; example.x.len()];
    for (span, &k) in example.sources.spans().iter().zip(&keep_source) {
        if !k {
            drop_token[span.range()].iter_mut().for_each(|d| *d = true);
        }
    }
    // new_index[p] = position of old token p in the pruned input.
    let mut new_index = Vec::with_capacity(example.x.len() + 1);
    let mut x = Vec::new();
    for (p, &tok) in example.x.as_slice().iter().enumerate() {
        new_index.push(x.len());
        if !drop_token[p] {
            x.push(tok);
        }
    }
    new_index.push(x.len());
    let spans = example
        .sources
        .spans()
        .iter()
        .zip(&keep_source)
        .filter(|(_, &k)| k)
        .map(|(s, _)| Span::new(new_index[s.start], new_index[s.end]))
        .collect();
    let kept_sorted: Vec<usize> = (0..n).filter(|&i| keep_source[i]).collect();
    Ok(PruneResult {
        kept: kept_sorted,
        example: Example {
            id: example.id.clone(),
            x: TokenSeq(x),
            sources: SourceSet(spans),
            y: example.y.clone(),
            targets: example.targets.clone(),
            text: None,
        },
    })
}

/// Keeps the `k` highest-scoring sources (ties to the lower index).
pub fn prune_sources(example: &Example, tau: &AttributionScores, k: usize) -> Result<PruneResult> {
    let n = example.n_sources();
    if tau.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: tau.len(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    prune_to(example, &tau.top_k(k))
}

/// `k` uniformly random source indices for one (example, target); the same
/// draw is reused for every method it is compared against.
pub fn random_sources(seed: u64, example: &Example, target: usize, k: usize) -> Vec<usize> {
    StreamKey::new(seed)
        .derive(domain::RANDOM_PRUNE)
        .derive_str(&example.id)
        .derive(target as u64)
        .derive(k as u64)
        .stream()
        .choose(example.n_sources(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub method: String,
    /// Number of sources retained; `None` for the keep-all reference.
    pub k: Option<usize>,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTable {
    pub rows: Vec<PruneRow>,
}

impl PruneTable {
    pub fn row(&self, method: &str, k: Option<usize>) -> Option<&PruneRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,k,mean,stderr\n");
        for r in &self.rows {
            let k = r.k.map(|k| k.to_string()).unwrap_or_else(|| "all".into());
            out.push_str(&format!("{},{k},{},{}\n", r.method, r.mean, r.stderr));
        }
        out
    }
}

/// Mean `log p(Y | X')` over all (example, target) pairs for each method
/// and retention size, plus keep-all and random-retention references.
pub fn prune_eval(
    backend: &dyn AttributableModel,
    dataset: &[Example],
    methods: &[NamedMethod],
    ks: &[usize],
    seed: u64,
) -> Result<PruneTable> {
    if !backend.supports_token_removal() {
        return Err(Error::BackendUnsupported(format!(
            "the {} backend cannot score physically shortened inputs",
            backend.name()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| (0..ex.targets.len()).map(move |t| (i, t)))
        .collect();
    let logprob_kept = |ex: &Example, t: usize, kept: &[usize]| -> Result<f64> {
        let pruned = prune_to(ex, kept)?.example;
        let n = pruned.n_sources();
        backend.logprob_under_ablation(&pruned, t, &AblationVector::all_kept(n))
    };
    let summarize = |method: &str, k: Option<usize>, values: Vec<f64>| {
        let (mean, stderr) = mean_stderr(&values);
        PruneRow {
            method: method.to_string(),
            k,
            n: values.len(),
            mean,
            stderr,
        }
    };

    let mut rows = Vec::new();
    let full = pairs
        .par_iter()
        .map(|&(i, t)| {
            let ex = &dataset[i];
            backend.logprob_under_ablation(ex, t, &AblationVector::all_kept(ex.n_sources()))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.push(summarize("keep_all", None, full));

    for &k in ks {
        let values = pairs
            .par_iter()
            .map(|&(i, t)| {
                let ex = &dataset[i];
                logprob_kept(ex, t, &random_sources(seed, ex, t, k.min(ex.n_sources())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(summarize("random", Some(k), values));
    }

    for method in methods {
        let taus = pairs
            .par_iter()
            .map(|&(i, t)| method.method.attribute(backend, &dataset[i], t, seed))
            .collect::<Result<Vec<_>>>()?;
        for &k in ks {
            let values = pairs
                .par_iter()
                .zip(&taus)
                .map(|(&(i, t), tau)| {
                    let ex = &dataset[i];
                    logprob_kept(ex, t, &tau.top_k(k.min(ex.n_sources())))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(summarize(&method.name, Some(k), values));
        }
    }
    Ok(PruneTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{planted_generate, PlantedBackend, PlantedConfig};
    use crate::methods::Method;
    use crate::types::validate_example;
    use crate::backend::ModelInfo;

    fn example() -> Example {
        Example {
            id: "p".into(),
            x: TokenSeq(vec![10, 11, 12, 13, 14, 15, 16, 17]),
            sources: SourceSet(vec![Span::new(0, 2), Span::new(3, 5), Span::new(5, 7)]),
            y: TokenSeq(vec![1, 2]),
            targets: vec![Span::new(0, 2)],
            text: None,
        }
    }

    fn info() -> ModelInfo {
        ModelInfo {
            n_layers: 1,
            n_heads: 1,
            vocab_size: 32,
            max_seq: 32,
        }
    }

    #[test]
    fn keep_all_is_identity() {
        let ex = example();
        let r = prune_sources(&ex, &AttributionScores(vec![0.1, 0.3, 0.2]), 3).unwrap();
        assert_eq!(r.example, ex);
        assert_eq!(r.kept, vec![0, 1, 2]);
    }

    #[test]
    fn removes_dropped_tokens_and_reindexes() {
        let ex = example();
        let r = prune_sources(&ex, &AttributionScores(vec![0.1, 0.3, 0.2]), 2).unwrap();
        assert_eq!(r.kept, vec![1, 2]);
        assert_eq!(r.example.x.0, vec![12, 13, 14, 15, 16, 17]);
        assert_eq!(r.example.sources.0, vec![Span::new(1, 3), Span::new(3, 5)]);
        assert_eq!(r.example.x.len(), ex.x.len() - 2);
        validate_example(&r.example, &info()).unwrap();

        let r = prune_sources(&ex, &AttributionScores(vec![0.5, 0.3, 0.2]), 1).unwrap();
        assert_eq!(r.example.x.0, vec![10, 11, 12, 17]);
        assert_eq!(r.example.sources.0, vec![Span::new(0, 2)]);
    }

    #[test]
    fn covering_sources_keep_only_top_tokens() {
        let ex = Example {
            sources: SourceSet(vec![Span::new(0, 3), Span::new(3, 8)]),
            ..example()
        };
        let r = prune_sources(&ex, &AttributionScores(vec![0.0, 1.0]), 1).unwrap();
        assert_eq!(r.example.x.0, vec![13, 14, 15, 16, 17]);
    }

    #[test]
    fn bad_k_rejected() {
        let ex = example();
        let tau = AttributionScores(vec![0.1, 0.3, 0.2]);
        assert!(prune_sources(&ex, &tau, 0).is_err());
        assert!(prune_sources(&ex, &tau, 4).is_err());
    }

    #[test]
    fn planted_backend_cannot_prune() {
        let config = PlantedConfig::default();
        let samples = planted_generate(&config, 2).unwrap();
        let b = PlantedBackend::new(config, &samples).unwrap();
        let data: Vec<Example> = samples.into_iter().map(|s| s.example).collect();
        let methods = [NamedMethod::new(Method::AverageAttention)];
        assert!(matches!(
            prune_eval(&b, &data, &methods, &[1], 0),
            Err(Error::BackendUnsupported(_))
        ));
    }

    #[test]
    fn random_draws_are_distinct_and_stable() {
        let ex = example();
        let a = random_sources(3, &ex, 0, 2);
        assert_eq!(a, random_sources(3, &ex, 0, 2));
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
    }
}
