//! Attention-derived visual memory.
//!
//! A relation-focused chain step yields raw keyword attention rows over the
//! visual tokens. They are averaged into an [`AggregatedAttention`], the
//! normalized entropy of that aggregate picks how many tokens to keep, and the
//! kept tokens form a renormalized [`BiasMask`] weighted by the step's
//! confidence. Later steps receive the fused masks as an additive bias on
//! visual-attention logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{normalized_entropy, ProbVector, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate attention: top-{k} entries have zero mass")]
    DegenerateAttention { k: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, MemoryError> {
    Err(MemoryError::InvalidArgument(msg.into()))
}

/// Mean keyword attention over visual tokens for one chain step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAttention {
    values: Vec<f64>,
    source_question_index: usize,
}

impl AggregatedAttention {
    pub fn new(values: Vec<f64>, source_question_index: usize) -> Result<Self, MemoryError> {
        if values.is_empty() {
            return invalid("empty attention");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return invalid(format!("attention entry {i} is negative or non-finite"));
        }
        if values.iter().all(|&v| v == 0.0) {
            return invalid("attention is all zero");
        }
        Ok(Self {
            values,
            source_question_index,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn source_question_index(&self) -> usize {
        self.source_question_index
    }

    /// The aggregate rescaled to a distribution.
    pub fn distribution(&self) -> ProbVector {
        ProbVector::normalized(&self.values).expect("validated on construction")
    }
}

/// Averages keyword-token attention rows over the last layers.
///
/// `layer_rows[l][t]` is the row of keyword token `t` in layer `l`, restricted
/// to visual positions. Every one of the `|T|·n` rows is weighted equally.
pub fn aggregate_attention(
    layer_rows: &[Vec<Vec<f64>>],
    source_question_index: usize,
) -> Result<AggregatedAttention, MemoryError> {
    if layer_rows.is_empty() {
        return invalid("no attention layers");
    }
    let m = match layer_rows.iter().flatten().next() {
        Some(row) => row.len(),
        None => return invalid("no keyword rows"),
    };
    let mut sum = vec![0.0; m];
    let mut count = 0usize;
    for (l, layer) in layer_rows.iter().enumerate() {
        if layer.is_empty() {
            return invalid(format!("layer {l} has no keyword rows"));
        }
        for (t, row) in layer.iter().enumerate() {
            if row.len() != m {
                return invalid(format!(
                    "layer {l} row {t} has length {}, expected {m}",
                    row.len()
                ));
            }
            for (acc, &v) in sum.iter_mut().zip(row) {
                if !v.is_finite() || v < 0.0 {
                    return invalid(format!(
                        "layer {l} row {t} has a negative or non-finite entry"
                    ));
                }
                *acc += v;
            }
            count += 1;
        }
    }
    let inv = 1.0 / count as f64;
    AggregatedAttention::new(
        sum.into_iter().map(|s| s * inv).collect(),
        source_question_index,
    )
}

/// `k = ⌊k_max · Ĥ⌋`, clamped to `[1, min(k_max, M)]`.
pub fn adaptive_k(attn: &AggregatedAttention, k_max: usize) -> Result<usize, MemoryError> {
    if k_max == 0 {
        return invalid("k_max must be at least 1");
    }
    let h = normalized_entropy(&attn.distribution());
    // Floating-point entropy of a uniform vector lands a hair under 1.
    let k = (k_max as f64 * h + crate::tensor::TOLERANCE).floor() as usize;
    Ok(k.clamp(1, k_max.min(attn.len())))
}

/// Sparse distribution over the most attended visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasMask {
    pub values: Vec<f64>,
    /// Selected token indices, most attended first.
    pub topk_indices: Vec<usize>,
    pub alpha: f64,
    pub k: usize,
    pub source_question_index: usize,
}

impl BiasMask {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Keeps the top-`k` attention entries, renormalized to sum to one.
pub fn build_mask(
    attn: &AggregatedAttention,
    k: usize,
    alpha: f64,
) -> Result<BiasMask, MemoryError> {
    let m = attn.len();
    if k == 0 || k > m {
        return invalid(format!("k = {k} outside [1, {m}]"));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return invalid(format!("alpha must be finite and nonnegative, got {alpha}"));
    }
    let topk = top_k_indices(attn.values(), k);
    let mass: f64 = topk.iter().map(|&i| attn.values()[i]).sum();
    if mass <= 0.0 {
        return Err(MemoryError::DegenerateAttention { k });
    }
    let mut values = vec![0.0; m];
    for &i in &topk {
        values[i] = attn.values()[i] / mass;
    }
    // A zero inside the selected set would break the strict-support invariant.
    if topk.iter().any(|&i| values[i] <= 0.0) {
        return Err(MemoryError::DegenerateAttention { k });
    }
    Ok(BiasMask {
        values,
        topk_indices: topk,
        alpha,
        k,
        source_question_index: attn.source_question_index(),
    })
}

/// Confidence weight `α = λ · confidence`.
pub fn compute_alpha(confidence: f64, lambda: f64) -> Result<f64, MemoryError> {
    if !(0.0..=1.0).contains(&confidence) {
        return invalid(format!("confidence {confidence} outside [0, 1]"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return invalid(format!("lambda must be positive, got {lambda}"));
    }
    Ok(lambda * confidence)
}

/// How recorded masks combine into one bias vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `Σ αⱼ Mⱼ / Σ αⱼ`: a distribution with total weight one.
    #[serde(alias = "eq6")]
    Eq6Literal,
    /// The weighted average scaled by the mean `α`, so a single mask gives
    /// `α · M`.
    #[default]
    #[serde(alias = "scaled")]
    ScaledAverage,
}

/// Fuses all masks in memory into a length-`M` bias. An all-zero weight
/// sum yields the zero vector.
pub fn fuse_masks(memory: &VisualMemory, mode: FusionMode) -> Result<Vec<f64>, MemoryError> {
    let masks = memory.masks();
    let Some(first) = masks.first() else {
        return invalid("visual memory is empty");
    };
    let m = first.len();
    if let Some(bad) = masks.iter().find(|mk| mk.len() != m) {
        return invalid(format!(
            "mask from step {} has length {}, expected {m}",
            bad.source_question_index,
            bad.len()
        ));
    }
    let total_alpha: f64 = masks.iter().map(|mk| mk.alpha).sum();
    if total_alpha <= 0.0 {
        return Ok(vec![0.0; m]);
    }
    let mut fused = vec![0.0; m];
    for mk in masks {
        let w = mk.alpha / total_alpha;
        for (f, v) in fused.iter_mut().zip(&mk.values) {
            *f += w * v;
        }
    }
    if mode == FusionMode::ScaledAverage {
        let mean_alpha = total_alpha / masks.len() as f64;
        fused.iter_mut().for_each(|f| *f *= mean_alpha);
    }
    Ok(fused)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub question: String,
    pub answer: String,
    pub confidence: f64,
}

/// Append-only list of answered questions within one chain run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TextualMemory {
    entries: Vec<MemoryEntry>,
}

impl TextualMemory {
    pub fn push(
        &mut self,
        question: impl Into<String>,
        answer: impl Into<String>,
        confidence: f64,
    ) {
        self.entries.push(MemoryEntry {
            question: question.into(),
            answer: answer.into(),
            confidence,
        });
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Append-only masks from relation-focused steps (index 3 and later).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualMemory {
    masks: Vec<BiasMask>,
}

impl VisualMemory {
    pub fn push(&mut self, mask: BiasMask) -> Result<(), MemoryError> {
        if mask.source_question_index < 3 {
            return invalid(format!(
                "masks are only recorded from step 3 on, got step {}",
                mask.source_question_index
            ));
        }
        if let Some(first) = self.masks.first() {
            if first.len() != mask.len() {
                return invalid("mask length differs from recorded masks");
            }
        }
        self.masks.push(mask);
        Ok(())
    }

    pub fn masks(&self) -> &[BiasMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}
