//! Domain types shared by every module, plus structural validation.
//!
//! Conventions used throughout the crate:
//!
//! * sources and targets are half-open token ranges `[start, end)`;
//! * an [`AblationVector`] bit set to `true` means the source is KEPT,
//!   `false` means it is ablated;
//! * attention features are indexed `[source, layer, head]`, row-major.

use serde::{Deserialize, Serialize};

use crate::backend::ModelInfo;
use crate::error::{Error, Result, SpanKind};

/// A sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

/// A half-open token range `[start, end)`. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

/// A source: a span of the input `X`.
pub type SourceSpan = Span;

/// A target: a span of the generated continuation `Y`.
pub type TargetSpan = Span;

/// Ordered, pairwise-disjoint source spans over `X`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceSet(pub Vec<SourceSpan>);

impl SourceSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn spans(&self) -> &[SourceSpan] {
        &self.0
    }

    /// Checks ordering, disjointness and bounds against an input of length `x_len`.
    pub fn validate(&self, x_len: usize) -> Result<()> {
        for (index, span) in self.0.iter().enumerate() {
            if span.start >= span.end || span.end > x_len {
                return Err(Error::SpanOutOfRange {
                    kind: SpanKind::Source,
                    index,
                    start: span.start,
                    end: span.end,
                    len: x_len,
                });
            }
        }
        for (i, pair) in self.0.windows(2).enumerate() {
            if pair[1].start < pair[0].end {
                return Err(Error::OverlappingSources {
                    first: i,
                    second: i + 1,
                });
            }
        }
        Ok(())
    }
}

/// Optional human-readable context attached to an example. `source_offsets`
/// holds one byte range into `context` per source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleText {
    pub context: String,
    pub source_offsets: Vec<Span>,
}

/// An input `X`, its sources, a continuation `Y` and the spans of `Y` to attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub x: TokenSeq,
    pub sources: SourceSet,
    pub y: TokenSeq,
    pub targets: Vec<TargetSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ExampleText>,
}

impl Example {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn target(&self, index: usize) -> Result<TargetSpan> {
        self.targets.get(index).copied().ok_or(Error::NoSuchTarget {
            index,
            count: self.targets.len(),
        })
    }

    /// `X` followed by `Y`.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut seq = Vec::with_capacity(self.x.len() + self.y.len());
        seq.extend_from_slice(self.x.as_slice());
        seq.extend_from_slice(self.y.as_slice());
        seq
    }
}

/// Checks every structural invariant of `example` against `info`.
pub fn validate_example(example: &Example, info: &ModelInfo) -> Result<()> {
    if example.x.is_empty() {
        return Err(Error::EmptySequence);
    }
    let total = example.x.len() + example.y.len();
    if total > info.max_seq {
        return Err(Error::TooLong {
            len: total,
            max: info.max_seq,
        });
    }
    for (position, &token) in example
        .x
        .as_slice()
        .iter()
        .chain(example.y.as_slice())
        .enumerate()
    {
        if token as usize >= info.vocab_size {
            return Err(Error::TokenOutOfVocab {
                position,
                token,
                vocab_size: info.vocab_size,
            });
        }
    }
    example.sources.validate(example.x.len())?;
    if example.targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    for (index, t) in example.targets.iter().enumerate() {
        if t.start >= t.end || t.end > example.y.len() {
            return Err(Error::SpanOutOfRange {
                kind: SpanKind::Target,
                index,
                start: t.start,
                end: t.end,
                len: example.y.len(),
            });
        }
    }
    if let Some(text) = &example.text {
        if text.source_offsets.len() != example.n_sources() {
            return Err(Error::LengthMismatch {
                expected: example.n_sources(),
                got: text.source_offsets.len(),
            });
        }
    }
    Ok(())
}

/// Which sources are kept (`true`) or ablated (`false`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AblationVector(pub Vec<bool>);

impl AblationVector {
    pub fn all_kept(n: usize) -> Self {
        AblationVector(vec![true; n])
    }

    pub fn all_ablated(n: usize) -> Self {
        AblationVector(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// ASCII form used by plan and trace files: char `i` is `'1'` when source `i` is kept.
    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidInput(format!(
                    "ablation bitstring contains {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(AblationVector)
    }

    /// Indicator vector as reals, for regression designs.
    pub fn as_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }
}

impl Serialize for AblationVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for AblationVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AblationVector::from_bitstring(&s).map_err(serde::de::Error::custom)
    }
}

/// Aggregated attention per `[source, layer, head]`.
///
/// Values are held at `f32` precision, the precision of record in trace
/// files, so that live and trace-backed runs see identical features.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnFeatures {
    n_sources: usize,
    n_layers: usize,
    n_heads: usize,
    values: Vec<f32>,
}

impl AttnFeatures {
    pub fn new(n_sources: usize, n_layers: usize, n_heads: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_sources * n_layers * n_heads {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape [{n_sources}, {n_layers}, {n_heads}]",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "attention feature {bad} is negative or non-finite"
            )));
        }
        Ok(AttnFeatures {
            n_sources,
            n_layers,
            n_heads,
            values,
        })
    }

    pub fn zeros(n_sources: usize, n_layers: usize, n_heads: usize) -> Self {
        AttnFeatures {
            n_sources,
            n_layers,
            n_heads,
            values: vec![0.0; n_sources * n_layers * n_heads],
        }
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn heads_per_source(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn get(&self, source: usize, layer: usize, head: usize) -> f32 {
        self.values[(source * self.n_layers + layer) * self.n_heads + head]
    }

    /// The `L * H` slab of source `i`, row-major over `(layer, head)`.
    pub fn source(&self, i: usize) -> &[f32] {
        let w = self.heads_per_source();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Returns features with sources reordered so that new source `j` is old source `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> AttnFeatures {
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(self.source(p));
        }
        AttnFeatures {
            n_sources: perm.len(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            values,
        }
    }
}

/// Per-head coefficients `theta[layer, head]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCoefficients {
    pub n_layers: usize,
    pub n_heads: usize,
    pub theta: Vec<f64>,
}

impl HeadCoefficients {
    pub fn new(n_layers: usize, n_heads: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != n_layers * n_heads {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {n_layers} x {n_heads} heads",
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("non-finite head coefficient".into()));
        }
        Ok(HeadCoefficients {
            n_layers,
            n_heads,
            theta,
        })
    }

    /// Every head weighted `1 / (L * H)`.
    pub fn uniform(n_layers: usize, n_heads: usize) -> Self {
        let n = n_layers * n_heads;
        HeadCoefficients {
            n_layers,
            n_heads,
            theta: vec![1.0 / n as f64; n],
        }
    }

    pub fn zeros(n_layers: usize, n_heads: usize) -> Self {
        HeadCoefficients {
            n_layers,
            n_heads,
            theta: vec![0.0; n_layers * n_heads],
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.theta[layer * self.n_heads + head]
    }

    /// `(layer, head)` of the coefficient with the largest magnitude; lowest index wins ties.
    pub fn argmax_abs(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, t) in self.theta.iter().enumerate() {
            if t.abs() > self.theta[best].abs() {
                best = i;
            }
        }
        (best / self.n_heads, best % self.n_heads)
    }
}

/// One score per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributionScores(pub Vec<f64>);

impl AttributionScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Source indices ordered by descending score; ties go to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }

    /// The `k` highest-scoring source indices (ties to the lower index), `k` clamped to `len`.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut r = self.ranking();
        r.truncate(k.min(self.0.len()));
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info() -> ModelInfo {
        ModelInfo {
            n_layers: 1,
            n_heads: 1,
            vocab_size: 16,
            max_seq: 32,
        }
    }

    fn example(sources: Vec<(usize, usize)>, targets: Vec<(usize, usize)>) -> Example {
        Example {
            id: "e".into(),
            x: TokenSeq((0..10).collect()),
            sources: SourceSet(sources.into_iter().map(Span::from).collect()),
            y: TokenSeq(vec![1, 2, 3, 4]),
            targets: targets.into_iter().map(Span::from).collect(),
            text: None,
        }
    }

    #[test]
    fn accepts_valid_example() {
        let ex = example(vec![(0, 3), (3, 6)], vec![(0, 2)]);
        validate_example(&ex, &info()).unwrap();
    }

    #[test]
    fn rejects_overlap() {
        let ex = example(vec![(0, 3), (2, 5)], vec![(0, 2)]);
        match validate_example(&ex, &info()) {
            Err(Error::OverlappingSources { first: 0, second: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_target_past_continuation() {
        let ex = example(vec![(0, 3)], vec![(3, 5)]);
        match validate_example(&ex, &info()) {
            Err(Error::SpanOutOfRange {
                kind: SpanKind::Target,
                index: 0,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_other_violations() {
        let ex = example(vec![(0, 3)], vec![]);
        assert!(matches!(
            validate_example(&ex, &info()),
            Err(Error::EmptyTargets)
        ));

        let ex = example(vec![(0, 11)], vec![(0, 1)]);
        assert!(matches!(
            validate_example(&ex, &info()),
            Err(Error::SpanOutOfRange { kind: SpanKind::Source, .. })
        ));

        let mut ex = example(vec![(0, 3)], vec![(0, 1)]);
        ex.x.0[4] = 99;
        assert!(matches!(
            validate_example(&ex, &info()),
            Err(Error::TokenOutOfVocab { position: 4, token: 99, .. })
        ));

        let mut small = info();
        small.max_seq = 12;
        let ex = example(vec![(0, 3)], vec![(0, 1)]);
        assert!(matches!(
            validate_example(&ex, &small),
            Err(Error::TooLong { len: 14, max: 12 })
        ));

        let ex = example(vec![(3, 3)], vec![(0, 1)]);
        assert!(validate_example(&ex, &info()).is_err());
    }

    #[test]
    fn bitstrings() {
        let v = AblationVector(vec![true, false, false, true]);
        assert_eq!(v.to_bitstring(), "1001");
        assert_eq!(AblationVector::from_bitstring("1001").unwrap(), v);
        assert!(AblationVector::from_bitstring("10x1").is_err());
    }

    #[test]
    fn top_k_breaks_ties_low_index_first() {
        let s = AttributionScores(vec![1.0, 3.0, 3.0, 0.5]);
        assert_eq!(s.top_k(2), vec![1, 2]);
        assert_eq!(AttributionScores(vec![0.0; 4]).top_k(1), vec![0]);
        assert_eq!(s.top_k(10).len(), 4);
    }

    #[test]
    fn example_json_roundtrip() {
        let ex = example(vec![(0, 3), (5, 6)], vec![(0, 2), (2, 4)]);
        let s = serde_json::to_string(&ex).unwrap();
        assert!(s.contains("\"sources\":[[0,3],[5,6]]"));
        let back: Example = serde_json::from_str(&s).unwrap();
        assert_eq!(back, ex);
    }
}
