//! A small decoder-only transformer in `f64`.
//!
//! Architecture: learned token and absolute position embeddings, `L`
//! pre-layer-norm blocks of causal multi-head softmax attention followed by
//! a ReLU FFN, a final layer norm and an untied unembedding. There are no
//! biases; layer-norm gains are 1 and offsets 0.
//!
//! Initialization: every weight is `init_std * z`, where `z` is the
//! Box-Muller normal at counter `k` (the element's row-major index) of the
//! stream `seed -> TOY_WEIGHTS -> tensor index`. Tensor indices follow the
//! order: 0 token embedding `[vocab, d]`, 1 position embedding
//! `[max_seq, d]`, then for each layer `l` starting at `2 + 6l`: `W_q`,
//! `W_k`, `W_v`, `W_o` (all `[d, d]`), `W_1` `[d, d_ffn]`, `W_2`
//! `[d_ffn, d]`, and finally the unembedding `[d, vocab]` at `2 + 6L`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, StreamKey};
use crate::types::{AttnFeatures, SourceSpan, TargetSpan};

const LN_EPS: f64 = 1e-5;

/// How an ablated key position is removed from attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Additive `-inf` before the softmax; surviving keys renormalize.
    #[default]
    PreSoftmaxNegInf,
    /// Softmax over all causal keys, then masked weights set to zero
    /// without renormalization.
    PostSoftmaxZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 64,
            max_seq: 128,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ffn,
            self.max_seq,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "toy model dimensions must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "init_std {} must be positive",
                self.init_std
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, std: f64, key: StreamKey) -> Self {
        let data = (0..rows * cols)
            .map(|k| std * key.gaussian_at(k as u64))
            .collect();
        Matrix { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = x * self` for a single row vector `x`.
    fn vec_mul(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xv * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

/// Post-softmax attention weights indexed `[layer, head, query, key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAttention {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub values: Vec<f64>,
}

impl RawAttention {
    pub fn zeros(n_layers: usize, n_heads: usize, seq_len: usize) -> Self {
        RawAttention {
            n_layers,
            n_heads,
            seq_len,
            values: vec![0.0; n_layers * n_heads * seq_len * seq_len],
        }
    }

    fn offset(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.n_heads + head) * self.seq_len + query) * self.seq_len
    }

    /// Weights of one query row over all key positions.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let o = self.offset(layer, head, query);
        &self.values[o..o + self.seq_len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f64] {
        let o = self.offset(layer, head, query);
        &mut self.values[o..o + self.seq_len]
    }
}

/// Outputs of one forward pass over a length-`T` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub vocab_size: usize,
    /// `[T, vocab]` next-token log-probabilities.
    pub logprobs: Vec<f64>,
    /// `[T, vocab]` pre-softmax logits.
    pub logits: Vec<f64>,
    pub attention: RawAttention,
}

impl ForwardOutput {
    pub fn logprobs_at(&self, position: usize) -> &[f64] {
        &self.logprobs[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn logits_at(&self, position: usize) -> &[f64] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    blocks: Vec<Block>,
    unembedding: Matrix,
}

fn layer_norm(x: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let key = StreamKey::new(config.seed).derive(domain::TOY_WEIGHTS);
        let (d, f, std) = (config.d_model, config.d_ffn, config.init_std);
        let tensor = |index: u64, rows: usize, cols: usize| {
            Matrix::random(rows, cols, std, key.derive(index))
        };
        let token_embedding = tensor(0, config.vocab_size, d);
        let position_embedding = tensor(1, config.max_seq, d);
        let blocks = (0..config.n_layers as u64)
            .map(|l| {
                let base = 2 + 6 * l;
                Block {
                    wq: tensor(base, d, d),
                    wk: tensor(base + 1, d, d),
                    wv: tensor(base + 2, d, d),
                    wo: tensor(base + 3, d, d),
                    w1: tensor(base + 4, d, f),
                    w2: tensor(base + 5, f, d),
                }
            })
            .collect();
        let unembedding = tensor(2 + 6 * config.n_layers as u64, d, config.vocab_size);
        Ok(ToyModel {
            config,
            token_embedding,
            position_embedding,
            blocks,
            unembedding,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// All parameters in initialization order, for equality checks.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.token_embedding.data);
        out.extend_from_slice(&self.position_embedding.data);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                out.extend_from_slice(&m.data);
            }
        }
        out.extend_from_slice(&self.unembedding.data);
        out
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq {
            return Err(Error::TooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfVocab {
                position,
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Input embeddings `[T, d]`: token embedding plus position embedding.
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut out = vec![0.0; tokens.len() * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut out[t * d..(t + 1) * d];
            for ((o, e), p) in row
                .iter_mut()
                .zip(self.token_embedding.row(tok as usize))
                .zip(self.position_embedding.row(t))
            {
                *o = e + p;
            }
        }
        Ok(out)
    }

    /// Full forward pass. Positions with `keep[i] == false` are removed as
    /// attention keys in every layer and head according to `mode`.
    pub fn forward(&self, tokens: &[u32], keep: &[bool], mode: MaskMode) -> Result<ForwardOutput> {
        let embeddings = self.embed(tokens)?;
        self.forward_embeddings(&embeddings, keep, mode)
    }

    /// Forward pass from precomputed input embeddings `[T, d]`.
    pub fn forward_embeddings(
        &self,
        embeddings: &[f64],
        keep: &[bool],
        mode: MaskMode,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let seq = embeddings.len() / d;
        if seq * d != embeddings.len() || seq == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} embedding values are not a whole number of {d}-wide rows",
                embeddings.len()
            )));
        }
        if seq > cfg.max_seq {
            return Err(Error::TooLong {
                len: seq,
                max: cfg.max_seq,
            });
        }
        if keep.len() != seq {
            return Err(Error::LengthMismatch {
                expected: seq,
                got: keep.len(),
            });
        }
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut hidden = embeddings.to_vec();
        let mut attention = RawAttention::zeros(cfg.n_layers, cfg.n_heads, seq);
        let mut normed = vec![0.0; d];
        let mut q = vec![0.0; seq * d];
        let mut k = vec![0.0; seq * d];
        let mut v = vec![0.0; seq * d];
        let mut mixed = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut ffn = vec![0.0; cfg.d_ffn];
        let mut scores = vec![0.0; seq];

        for (layer, block) in self.blocks.iter().enumerate() {
            for t in 0..seq {
                layer_norm(&hidden[t * d..(t + 1) * d], &mut normed);
                block.wq.vec_mul(&normed, &mut q[t * d..(t + 1) * d]);
                block.wk.vec_mul(&normed, &mut k[t * d..(t + 1) * d]);
                block.wv.vec_mul(&normed, &mut v[t * d..(t + 1) * d]);
            }
            for t in 0..seq {
                mixed.iter_mut().for_each(|m| *m = 0.0);
                for head in 0..cfg.n_heads {
                    let hs = head * dh..(head + 1) * dh;
                    let qt = &q[t * d..][hs.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let visible = keep[s] || mode == MaskMode::PostSoftmaxZero;
                        scores[s] = if visible {
                            let ks = &k[s * d..][hs.clone()];
                            qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(scores[s]);
                    }
                    let row = attention.row_mut(layer, head, t);
                    if max == f64::NEG_INFINITY {
                        // No visible key: the row stays all-zero.
                        continue;
                    }
                    let mut total = 0.0;
                    for s in 0..=t {
                        let e = if scores[s] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[s] - max).exp()
                        };
                        row[s] = e;
                        total += e;
                    }
                    for s in 0..=t {
                        row[s] /= total;
                        if mode == MaskMode::PostSoftmaxZero && !keep[s] {
                            row[s] = 0.0;
                        }
                    }
                    let out = &mut mixed[hs.clone()];
                    for s in 0..=t {
                        let w = row[s];
                        if w == 0.0 {
                            continue;
                        }
                        for (o, vv) in out.iter_mut().zip(&v[s * d..][hs.clone()]) {
                            *o += w * vv;
                        }
                    }
                }
                block.wo.vec_mul(&mixed, &mut proj);
                for (h, p) in hidden[t * d..(t + 1) * d].iter_mut().zip(&proj) {
                    *h += p;
                }
            }
            for t in 0..seq {
                let row = &mut hidden[t * d..(t + 1) * d];
                layer_norm(row, &mut normed);
                block.w1.vec_mul(&normed, &mut ffn);
                ffn.iter_mut().for_each(|x| *x = x.max(0.0));
                block.w2.vec_mul(&ffn, &mut proj);
                for (h, p) in row.iter_mut().zip(&proj) {
                    *h += p;
                }
            }
        }

        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; seq * vocab];
        let mut logprobs = vec![0.0; seq * vocab];
        for t in 0..seq {
            layer_norm(&hidden[t * d..(t + 1) * d], &mut normed);
            self.unembedding
                .vec_mul(&normed, &mut logits[t * vocab..(t + 1) * vocab]);
            log_softmax(
                &logits[t * vocab..(t + 1) * vocab],
                &mut logprobs[t * vocab..(t + 1) * vocab],
            );
        }
        Ok(ForwardOutput {
            vocab_size: vocab,
            logprobs,
            logits,
            attention,
        })
    }

    /// Input tokens needed to score `target` of continuation `y` after prompt `x`.
    fn scoring_input(x: &[u32], y: &[u32], target: TargetSpan) -> Vec<u32> {
        let mut seq = Vec::with_capacity(x.len() + target.end);
        seq.extend_from_slice(x);
        seq.extend_from_slice(&y[..target.end - 1]);
        seq
    }

    fn check_target(x_len: usize, y: &[u32], target: TargetSpan) -> Result<()> {
        if x_len == 0 {
            return Err(Error::EmptySequence);
        }
        if target.start >= target.end || target.end > y.len() {
            return Err(Error::SpanOutOfRange {
                kind: crate::error::SpanKind::Target,
                index: 0,
                start: target.start,
                end: target.end,
                len: y.len(),
            });
        }
        Ok(())
    }

    /// Sum of `log p(y_j | x, y_<j)` over `j` in `target`, with the input
    /// positions flagged `false` in `x_keep` masked. `Y` is never masked.
    pub fn target_logprob(
        &self,
        x: &[u32],
        y: &[u32],
        target: TargetSpan,
        x_keep: &[bool],
        mode: MaskMode,
    ) -> Result<f64> {
        Self::check_target(x.len(), y, target)?;
        let tokens = Self::scoring_input(x, y, target);
        let keep = extend_keep(x_keep, x.len(), tokens.len())?;
        let out = self.forward(&tokens, &keep, mode)?;
        Ok(score_target(&out, x.len(), y, target))
    }

    /// Unablated attention for scoring `target`.
    pub fn target_attention(&self, x: &[u32], y: &[u32], target: TargetSpan) -> Result<RawAttention> {
        Self::check_target(x.len(), y, target)?;
        let tokens = Self::scoring_input(x, y, target);
        let keep = vec![true; tokens.len()];
        Ok(self.forward(&tokens, &keep, MaskMode::default())?.attention)
    }

    /// Appends `n_new` argmax tokens to `prompt`; ties go to the lowest id.
    pub fn generate_greedy(&self, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
        if prompt.len() + n_new > self.config.max_seq {
            return Err(Error::TooLong {
                len: prompt.len() + n_new,
                max: self.config.max_seq,
            });
        }
        let mut seq = prompt.to_vec();
        for _ in 0..n_new {
            let keep = vec![true; seq.len()];
            let out = self.forward(&seq, &keep, MaskMode::default())?;
            seq.push(argmax(out.logits_at(seq.len() - 1)) as u32);
        }
        Ok(seq)
    }

    /// Per-input-token l1 norm of the gradient of the target log-probability
    /// with respect to that token's embedding, by central differences with
    /// step `step` on every embedding coordinate.
    pub fn input_grad_l1(
        &self,
        x: &[u32],
        y: &[u32],
        target: TargetSpan,
        x_keep: &[bool],
        mode: MaskMode,
        step: f64,
    ) -> Result<Vec<f64>> {
        Self::check_target(x.len(), y, target)?;
        let tokens = Self::scoring_input(x, y, target);
        let keep = extend_keep(x_keep, x.len(), tokens.len())?;
        let base = self.embed(&tokens)?;
        let d = self.config.d_model;
        let eval = |emb: &[f64]| -> Result<f64> {
            let out = self.forward_embeddings(emb, &keep, mode)?;
            Ok(score_target(&out, x.len(), y, target))
        };
        let partials: Vec<f64> = (0..x.len() * d)
            .into_par_iter()
            .map(|coord| {
                let mut plus = base.clone();
                plus[coord] += step;
                let mut minus = base.clone();
                minus[coord] -= step;
                Ok((eval(&plus)? - eval(&minus)?) / (2.0 * step))
            })
            .collect::<Result<_>>()?;
        Ok(partials
            .chunks(d)
            .map(|c| c.iter().map(|g| g.abs()).sum())
            .collect())
    }

    /// Central-difference gradient of the target log-probability with
    /// respect to the embedding of input position `position`.
    pub fn input_grad(
        &self,
        x: &[u32],
        y: &[u32],
        target: TargetSpan,
        position: usize,
        step: f64,
    ) -> Result<Vec<f64>> {
        Self::check_target(x.len(), y, target)?;
        let tokens = Self::scoring_input(x, y, target);
        let keep = vec![true; tokens.len()];
        let base = self.embed(&tokens)?;
        let d = self.config.d_model;
        (0..d)
            .map(|c| {
                let mut plus = base.clone();
                plus[position * d + c] += step;
                let mut minus = base.clone();
                minus[position * d + c] -= step;
                let fp = score_target(&self.forward_embeddings(&plus, &keep, MaskMode::default())?, x.len(), y, target);
                let fm = score_target(&self.forward_embeddings(&minus, &keep, MaskMode::default())?, x.len(), y, target);
                Ok((fp - fm) / (2.0 * step))
            })
            .collect()
    }

    /// Target log-probability with an additive perturbation on input embeddings.
    pub fn target_logprob_perturbed(
        &self,
        x: &[u32],
        y: &[u32],
        target: TargetSpan,
        delta: &[f64],
    ) -> Result<f64> {
        Self::check_target(x.len(), y, target)?;
        let tokens = Self::scoring_input(x, y, target);
        let mut emb = self.embed(&tokens)?;
        for (e, dlt) in emb.iter_mut().zip(delta) {
            *e += dlt;
        }
        let keep = vec![true; tokens.len()];
        let out = self.forward_embeddings(&emb, &keep, MaskMode::default())?;
        Ok(score_target(&out, x.len(), y, target))
    }
}

fn extend_keep(x_keep: &[bool], x_len: usize, total: usize) -> Result<Vec<bool>> {
    if x_keep.len() != x_len {
        return Err(Error::LengthMismatch {
            expected: x_len,
            got: x_keep.len(),
        });
    }
    let mut keep = x_keep.to_vec();
    keep.resize(total, true);
    Ok(keep)
}

fn score_target(out: &ForwardOutput, x_len: usize, y: &[u32], target: TargetSpan) -> f64 {
    target
        .range()
        .map(|j| out.logprobs_at(x_len + j - 1)[y[j] as usize])
        .sum()
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Averages attention from the target's generating positions onto each source.
///
/// The token `y_j` is produced at query position `x_len + j - 1`, so
/// `features[s, l, h] = mean_j sum_{i in s} raw[l, h, x_len + j - 1, i]`.
/// Attention onto non-source or continuation positions is ignored.
pub fn aggregate_attention(
    raw: &RawAttention,
    x_len: usize,
    target: TargetSpan,
    sources: &[SourceSpan],
) -> Result<AttnFeatures> {
    use crate::error::SpanKind;
    if x_len == 0 || target.start >= target.end || x_len + target.end - 1 > raw.seq_len {
        return Err(Error::SpanOutOfRange {
            kind: SpanKind::Target,
            index: 0,
            start: target.start,
            end: target.end,
            len: raw.seq_len.saturating_sub(x_len) + 1,
        });
    }
    if let Some((index, s)) = sources.iter().enumerate().find(|(_, s)| s.end > x_len) {
        return Err(Error::SpanOutOfRange {
            kind: SpanKind::Source,
            index,
            start: s.start,
            end: s.end,
            len: x_len,
        });
    }
    let (nl, nh) = (raw.n_layers, raw.n_heads);
    let inv = 1.0 / target.len() as f64;
    let mut values = vec![0.0f32; sources.len() * nl * nh];
    for (si, span) in sources.iter().enumerate() {
        for layer in 0..nl {
            for head in 0..nh {
                let mut acc = 0.0;
                for j in target.range() {
                    let row = raw.row(layer, head, x_len + j - 1);
                    acc += row[span.range()].iter().sum::<f64>();
                }
                values[(si * nl + layer) * nh + head] = (acc * inv) as f32;
            }
        }
    }
    AttnFeatures::new(sources.len(), nl, nh, values)
}
