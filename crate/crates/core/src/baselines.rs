//! Non-learned attribution baselines.

use serde::{Deserialize, Serialize};

use crate::at2::score;
use crate::backend::AttributableModel;
use crate::error::{Error, Result};
use crate::types::{AttnFeatures, AttributionScores, Example, HeadCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    AverageAttention,
    GradientL1,
}

/// Mean of each source's attention over all heads. Evaluated as the
/// learned score with uniform coefficients, so the two agree bitwise.
pub fn average_attention(features: &AttnFeatures) -> AttributionScores {
    let uniform = HeadCoefficients::uniform(features.n_layers(), features.n_heads());
    score(&uniform, features).expect("uniform coefficients match the feature shape")
}

/// Sum over each source's tokens of the input-gradient l1 norm.
pub fn gradient_l1_attribute(
    backend: &dyn AttributableModel,
    example: &Example,
    target: usize,
) -> Result<AttributionScores> {
    let per_token = backend.input_grad_l1(example, target)?;
    if per_token.len() != example.x.len() {
        return Err(Error::LengthMismatch {
            expected: example.x.len(),
            got: per_token.len(),
        });
    }
    Ok(AttributionScores(
        example
            .sources
            .spans()
            .iter()
            .map(|s| per_token[s.range()].iter().sum())
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{planted_generate, PlantedBackend, PlantedConfig};
    use crate::toy::{MaskMode, ToyBackend, ToyConfig, ToyModel};
    use crate::types::{SourceSet, Span, TokenSeq};

    #[test]
    fn equal_features_give_equal_scores() {
        let f = AttnFeatures::new(3, 2, 2, vec![0.25; 12]).unwrap();
        let s = average_attention(&f);
        assert!(s.as_slice().iter().all(|&v| v == s.as_slice()[0]));
    }

    #[test]
    fn permutation_equivariance() {
        let values: Vec<f32> = (0..24).map(|i| (i * 7 % 11) as f32 / 11.0).collect();
        let f = AttnFeatures::new(4, 2, 3, values).unwrap();
        let perm = [3, 1, 0, 2];
        let a = average_attention(&f);
        let b = average_attention(&f.permuted(&perm));
        for (j, &p) in perm.iter().enumerate() {
            assert_eq!(b.0[j], a.0[p]);
        }
    }

    #[test]
    fn gradient_baseline_needs_embeddings() {
        let config = PlantedConfig::default();
        let samples = planted_generate(&config, 1).unwrap();
        let b = PlantedBackend::new(config, &samples).unwrap();
        assert!(matches!(
            gradient_l1_attribute(&b, &samples[0].example, 0),
            Err(Error::BackendUnsupported(_))
        ));
    }

    fn toy_example(spans: Vec<Span>) -> Example {
        Example {
            id: "g".into(),
            x: TokenSeq(vec![3, 14, 15, 9, 26, 5, 35]),
            sources: SourceSet(spans),
            y: TokenSeq(vec![8, 9]),
            targets: vec![Span::new(0, 2)],
            text: None,
        }
    }

    #[test]
    fn gradient_scores_are_additive_over_spans() {
        let backend = ToyBackend::new(ToyModel::new(ToyConfig::default()).unwrap(), MaskMode::default());
        let whole = toy_example(vec![Span::new(0, 7)]);
        let halves = toy_example(vec![Span::new(0, 3), Span::new(3, 7)]);
        let thirds = toy_example(vec![Span::new(0, 1), Span::new(1, 3), Span::new(3, 7)]);
        let total = gradient_l1_attribute(&backend, &whole, 0).unwrap();
        let h = gradient_l1_attribute(&backend, &halves, 0).unwrap();
        let t = gradient_l1_attribute(&backend, &thirds, 0).unwrap();
        let tokens = backend.input_grad_l1(&whole, 0).unwrap();
        assert!((total.0[0] - tokens.iter().sum::<f64>()).abs() < 1e-12);
        assert!((h.0[0] + h.0[1] - total.0[0]).abs() < 1e-12);
        assert!((t.0[0] + t.0[1] - h.0[0]).abs() < 1e-12);
        assert!(t.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gradient_scores_are_schedule_independent() {
        let backend = ToyBackend::new(ToyModel::new(ToyConfig::default()).unwrap(), MaskMode::default());
        let ex = toy_example(vec![Span::new(0, 3), Span::new(3, 7)]);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = serial.install(|| gradient_l1_attribute(&backend, &ex, 0).unwrap());
        let b = gradient_l1_attribute(&backend, &ex, 0).unwrap();
        assert_eq!(a, b);
    }
}
