//! Example-specific surrogate modeling: a Lasso fit on logit-scaled
//! ablation outcomes whose weights are the attribution scores.

use crate::ablation::{eval_f, logit_from_logprob, sample_ablations};
use crate::backend::AttributableModel;
use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::types::{AttributionScores, Example};

/// Regularization strength used for ESM unless overridden.
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const LASSO_TOL: f64 = 1e-6;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub w: Vec<f64>,
    pub b: f64,
    pub n_sweeps: usize,
    pub converged: bool,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Minimizes `1/(2m) * ||y - X w - b||^2 + lambda * ||w||_1` by cyclic
/// coordinate descent with an unpenalized intercept and unstandardized
/// columns. `rows` is the `m x d` design.
pub fn fit_lasso(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LassoFit> {
    fit_lasso_with(rows, y, lambda, LASSO_TOL, LASSO_MAX_SWEEPS)
}

/// [`fit_lasso`] with an explicit tolerance and sweep budget.
pub fn fit_lasso_with(
    rows: &[Vec<f64>],
    y: &[f64],
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<LassoFit> {
    let m = rows.len();
    if m == 0 || m != y.len() {
        return Err(Error::InvalidInput(format!(
            "lasso needs a non-empty design with one target per row ({m} rows, {} targets)",
            y.len()
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("ragged or empty design".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda {lambda} must be >= 0")));
    }
    if rows.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("design or target contains NaN/inf".into()));
    }

    let mf = m as f64;
    let col_mean: Vec<f64> = (0..d)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / mf)
        .collect();
    let y_mean = y.iter().sum::<f64>() / mf;
    // Column-major centered design.
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|c| rows.iter().map(|r| r[c] - col_mean[c]).collect())
        .collect();
    let sq_norm: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / mf)
        .collect();

    let mut w = vec![0.0; d];
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut n_sweeps = 0;
    let mut converged = false;
    while n_sweeps < max_sweeps {
        n_sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for c in 0..d {
            if sq_norm[c] == 0.0 {
                continue;
            }
            let col = &cols[c];
            let corr = col.iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() / mf;
            let updated = soft_threshold(corr + sq_norm[c] * w[c], lambda) / sq_norm[c];
            let delta = updated - w[c];
            if delta != 0.0 {
                for (r, x) in resid.iter_mut().zip(col) {
                    *r -= delta * x;
                }
                w[c] = updated;
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta < tol {
            converged = true;
            break;
        }
    }
    let b = y_mean - col_mean.iter().zip(&w).map(|(m, w)| m * w).sum::<f64>();
    Ok(LassoFit {
        w,
        b,
        n_sweeps,
        converged,
    })
}

/// The penalized objective minimized by [`fit_lasso`].
pub fn lasso_objective(rows: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> f64 {
    let m = rows.len() as f64;
    let sse: f64 = rows
        .iter()
        .zip(y)
        .map(|(r, t)| {
            let pred = b + r.iter().zip(w).map(|(x, w)| x * w).sum::<f64>();
            (t - pred).powi(2)
        })
        .sum();
    sse / (2.0 * m) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Stream used by ESM's own ablations for one (example, target) pair.
pub fn esm_stream(seed: u64, example_id: &str, target: usize) -> StreamKey {
    StreamKey::new(seed)
        .derive(domain::ESM)
        .derive_str(example_id)
        .derive(target as u64)
}

/// Samples `m` ablations, regresses their logit-scaled outcomes on the
/// ablation vectors, and returns the Lasso weights (intercept dropped).
pub fn esm_attribute(
    backend: &dyn AttributableModel,
    example: &Example,
    target: usize,
    m: usize,
    lambda: f64,
    key: StreamKey,
) -> Result<AttributionScores> {
    if m == 0 {
        return Err(Error::InvalidInput("ESM needs at least one ablation".into()));
    }
    let ablations = sample_ablations(example.n_sources(), m, key);
    let mut rows = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for v in &ablations {
        y.push(logit_from_logprob(eval_f(backend, example, target, v)?)?);
        rows.push(v.as_f64().collect());
    }
    Ok(AttributionScores(fit_lasso(&rows, &y, lambda)?.w))
}
