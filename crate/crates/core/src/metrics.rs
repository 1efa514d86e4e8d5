//! Correlation primitives, top-k drop, the linear datamodeling score and
//! the batch evaluation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{eval_f, sample_ablations};
use crate::backend::AttributableModel;
use crate::error::{Error, Result};
use crate::methods::NamedMethod;
use crate::rng::{domain, StreamKey};
use crate::types::{AblationVector, AttributionScores, Example};

/// Default number of top sources ablated by [`top_k_drop`].
pub const DEFAULT_TOP_K: usize = 5;
/// Default number of random ablations used by [`lds`].
pub const DEFAULT_LDS_M: usize = 64;

/// A correlation value. `degenerate` is set when either input had zero
/// variance, in which case `value` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least two points".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average-tie ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `log f(all kept) - log f(top k ablated)`; ties in `tau` go to the lower
/// source index. `k` is clamped to the number of sources and `k = 0` gives 0.
pub fn top_k_drop(
    backend: &dyn AttributableModel,
    example: &Example,
    target: usize,
    tau: &AttributionScores,
    k: usize,
) -> Result<f64> {
    let n = example.n_sources();
    if tau.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: tau.len(),
        });
    }
    if k == 0 {
        return Ok(0.0);
    }
    let mut v = AblationVector::all_kept(n);
    for i in tau.top_k(k) {
        v.0[i] = false;
    }
    let full = eval_f(backend, example, target, &AblationVector::all_kept(n))?;
    Ok(full - eval_f(backend, example, target, &v)?)
}

/// Stream of the evaluation ablations for one (example, target) pair.
/// Shared by all methods so their scores are paired.
pub fn lds_stream(seed: u64, example_id: &str, target: usize) -> StreamKey {
    StreamKey::new(seed)
        .derive(domain::LDS)
        .derive_str(example_id)
        .derive(target as u64)
}

/// Spearman correlation between actual outcomes `log f(v)` and predicted
/// effects `<tau, v>` over the given ablations.
pub fn lds_on(
    backend: &dyn AttributableModel,
    example: &Example,
    target: usize,
    tau: &AttributionScores,
    ablations: &[AblationVector],
) -> Result<Correlation> {
    if ablations.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "LDS needs at least 3 ablations, got {}",
            ablations.len()
        )));
    }
    if tau.len() != example.n_sources() {
        return Err(Error::LengthMismatch {
            expected: example.n_sources(),
            got: tau.len(),
        });
    }
    let actual = ablations
        .iter()
        .map(|v| eval_f(backend, example, target, v))
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<f64> = ablations
        .iter()
        .map(|v| tau.as_slice().iter().zip(v.as_f64()).map(|(t, b)| t * b).sum())
        .collect();
    spearman(&actual, &predicted)
}

/// [`lds_on`] over `m` fresh ablations drawn from `key`.
pub fn lds(
    backend: &dyn AttributableModel,
    example: &Example,
    target: usize,
    tau: &AttributionScores,
    m: usize,
    key: StreamKey,
) -> Result<Correlation> {
    let ablations = sample_ablations(example.n_sources(), m, key);
    lds_on(backend, example, target, tau, &ablations)
}

/// Which ablations the LDS evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LdsAblations {
    /// `m` fresh ablations per (example, target), keyed on the seed.
    Sampled(usize),
    /// The ablations the backend has on record (trace backends).
    Recorded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TopKDrop(usize),
    Lds(LdsAblations),
}

impl Metric {
    pub fn label(&self) -> String {
        match self {
            Metric::TopKDrop(k) => format!("top{k}_drop"),
            Metric::Lds(LdsAblations::Sampled(m)) => format!("lds{m}"),
            Metric::Lds(LdsAblations::Recorded) => "lds_recorded".into(),
        }
    }

    fn evaluate(
        &self,
        backend: &dyn AttributableModel,
        example: &Example,
        target: usize,
        tau: &AttributionScores,
        seed: u64,
    ) -> Result<f64> {
        match *self {
            Metric::TopKDrop(k) => top_k_drop(backend, example, target, tau, k),
            Metric::Lds(LdsAblations::Sampled(m)) => {
                Ok(lds(backend, example, target, tau, m, lds_stream(seed, &example.id, target))?.value)
            }
            Metric::Lds(LdsAblations::Recorded) => {
                let recorded = backend.recorded_ablations(example, target).ok_or_else(|| {
                    Error::BackendUnsupported(format!(
                        "the {} backend keeps no recorded ablations",
                        backend.name()
                    ))
                })?;
                Ok(lds_on(backend, example, target, tau, &recorded)?.value)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub example_id: String,
    pub target: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero when `n < 2`.
    pub stderr: f64,
    pub values: Vec<MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub metrics: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricSummary>,
    pub config: EvalConfigEcho,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl EvalReport {
    pub fn row(&self, method: &str, metric: &str) -> Option<&MetricSummary> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric)
    }

    /// One line per (method, example, target, metric) value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,example_id,target,metric,value\n");
        for row in &self.rows {
            for v in &row.values {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.method, v.example_id, v.target, row.metric, v.value
                ));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,metric,n,mean,stderr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.method, r.metric, r.n, r.mean, r.stderr));
        }
        out
    }
}

/// Attributes every (example, target) once per method and scores each
/// attribution on every metric. Metric ablations are shared across methods.
pub fn evaluate_suite(
    dataset: &[Example],
    backend: &dyn AttributableModel,
    methods: &[NamedMethod],
    metrics: &[Metric],
    seed: u64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| (0..ex.targets.len()).map(move |t| (i, t)))
        .collect();
    let mut rows = Vec::new();
    for method in methods {
        // values[pair][metric]
        let values = pairs
            .par_iter()
            .map(|&(i, t)| {
                let ex = &dataset[i];
                let tau = method.method.attribute(backend, ex, t, seed)?;
                metrics
                    .iter()
                    .map(|m| m.evaluate(backend, ex, t, &tau, seed))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (mi, metric) in metrics.iter().enumerate() {
            let per: Vec<MetricValue> = pairs
                .iter()
                .zip(&values)
                .map(|(&(i, t), v)| MetricValue {
                    example_id: dataset[i].id.clone(),
                    target: t,
                    value: v[mi],
                })
                .collect();
            let raw: Vec<f64> = per.iter().map(|v| v.value).collect();
            let (mean, stderr) = mean_stderr(&raw);
            rows.push(MetricSummary {
                method: method.name.clone(),
                metric: metric.label(),
                n: raw.len(),
                mean,
                stderr,
                values: per,
            });
        }
    }
    Ok(EvalReport {
        rows,
        config: EvalConfigEcho {
            metrics: metrics.iter().map(Metric::label).collect(),
            seed,
        },
    })
}
