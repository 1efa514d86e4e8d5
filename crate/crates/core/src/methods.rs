//! Attribution methods behind one interface.

use crate::at2::score;
use crate::backend::AttributableModel;
use crate::baselines::{average_attention, gradient_l1_attribute};
use crate::error::Result;
use crate::esm::{esm_attribute, esm_stream};
use crate::types::{AttributionScores, Example, HeadCoefficients};

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Learned head coefficients applied to the backend's attention features.
    At2(HeadCoefficients),
    AverageAttention,
    /// Example-specific Lasso surrogate over `m` ablations.
    Esm { m: usize, lambda: f64 },
    GradientL1,
}

impl Method {
    /// Short default label, e.g. `at2`, `avg_attn`, `esm32`, `grad_l1`.
    pub fn label(&self) -> String {
        match self {
            Method::At2(_) => "at2".into(),
            Method::AverageAttention => "avg_attn".into(),
            Method::Esm { m, .. } => format!("esm{m}"),
            Method::GradientL1 => "grad_l1".into(),
        }
    }

    /// Scores for one (example, target). `seed` keys ESM's ablations.
    pub fn attribute(
        &self,
        backend: &dyn AttributableModel,
        example: &Example,
        target: usize,
        seed: u64,
    ) -> Result<AttributionScores> {
        match self {
            Method::At2(theta) => score(theta, &backend.aggregated_attention(example, target)?),
            Method::AverageAttention => {
                Ok(average_attention(&backend.aggregated_attention(example, target)?))
            }
            Method::Esm { m, lambda } => esm_attribute(
                backend,
                example,
                target,
                *m,
                *lambda,
                esm_stream(seed, &example.id, target),
            ),
            Method::GradientL1 => gradient_l1_attribute(backend, example, target),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedMethod {
    pub name: String,
    pub method: Method,
}

impl NamedMethod {
    pub fn new(method: Method) -> Self {
        NamedMethod {
            name: method.label(),
            method,
        }
    }

    pub fn named(name: impl Into<String>, method: Method) -> Self {
        NamedMethod {
            name: name.into(),
            method,
        }
    }
}

impl From<Method> for NamedMethod {
    fn from(method: Method) -> Self {
        NamedMethod::new(method)
    }
}
