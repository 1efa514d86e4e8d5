//! Token attribution from attention features.
//!
//! The crate scores how much each *source* (a span of the input) matters
//! to a model's generation of a *target* span. Four methods are provided:
//!
//! * [`at2`]: a linear function of per-head attention features whose head
//!   coefficients are learned once, across a dataset, to predict the effect
//!   of random source ablations;
//! * [`esm`]: a per-example Lasso surrogate fit on ablation outcomes;
//! * [`baselines`]: average attention and input-gradient l1 norms.
//!
//! Models are accessed through the [`backend::AttributableModel`] trait.
//! Three backends ship with the crate: a seeded toy transformer ([`toy`]),
//! a planted-ground-truth synthetic backend ([`backend::PlantedBackend`])
//! and a trace reader ([`trace`]) for outcomes exported from other models.

pub mod ablation;
pub mod at2;
pub mod backend;
pub mod baselines;
pub mod error;
pub mod esm;
pub mod methods;
pub mod metrics;
pub mod prune;
pub mod rng;
pub mod toy;
pub mod trace;
pub mod types;

pub use backend::{AttributableModel, ModelInfo};
pub use error::{Error, Result};
pub use methods::{Method, NamedMethod};
pub use types::{
    validate_example, AblationVector, AttnFeatures, AttributionScores, Example, ExampleText,
    HeadCoefficients, SourceSet, SourceSpan, Span, TargetSpan, TokenSeq,
};
