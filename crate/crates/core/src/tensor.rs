//! Small dense-matrix numerics used by the attention memory.
//!
//! Everything here is a pure function over owned `f64` buffers. There is no
//! attempt at general linear algebra: only the handful of operations the
//! reasoning chain needs (row softmax, biased scaled dot-product attention,
//! keyword cross-attention and normalized entropy).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for distribution checks.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, TensorError> {
    Err(TensorError::InvalidArgument(msg.into()))
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if values.len() != rows * cols {
            return invalid(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value at flat index {i}"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.get(r, c);
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            values: out,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return invalid(format!(
                "inner dimensions disagree: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            values: out,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != other.rows || self.cols != other.cols {
            return invalid(format!(
                "shape mismatch: {}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// A nonnegative vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self, TensorError> {
        if values.is_empty() {
            return invalid("empty distribution");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return invalid(format!("entry {i} is negative or non-finite"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > TOLERANCE {
            return invalid(format!("entries sum to {sum}, expected 1"));
        }
        Ok(Self(values))
    }

    /// Rescales a nonnegative vector with positive mass into a distribution.
    pub fn normalized(values: &[f64]) -> Result<Self, TensorError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return invalid(format!("entry {i} is negative or non-finite"));
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return invalid("vector has no mass");
        }
        Ok(Self(values.iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = TensorError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stabilized softmax applied to every row.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix, TensorError> {
    if m.rows == 0 || m.cols == 0 {
        return invalid("softmax of an empty matrix");
    }
    let mut values = m.values.clone();
    for row in values.chunks_mut(m.cols) {
        softmax_in_place(row);
    }
    Ok(Matrix {
        rows: m.rows,
        cols: m.cols,
        values,
    })
}

/// `softmax(q kᵀ · scale + bias) v`.
///
/// `scale` is usually `1/√d_k`. The bias is added to the logits before the
/// softmax, one row per query.
pub fn attention_with_bias(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    bias: &Matrix,
    scale: f64,
) -> Result<Matrix, TensorError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return invalid(format!("scale must be positive, got {scale}"));
    }
    if q.cols != k.cols {
        return invalid(format!(
            "query dim {} differs from key dim {}",
            q.cols, k.cols
        ));
    }
    if k.rows != v.rows {
        return invalid(format!("{} keys but {} value rows", k.rows, v.rows));
    }
    if bias.rows != q.rows || bias.cols != k.rows {
        return invalid(format!(
            "bias must be {}x{}, got {}x{}",
            q.rows, k.rows, bias.rows, bias.cols
        ));
    }
    let logits = q.matmul(&k.transpose())?.scale(scale).add(bias)?;
    softmax_rows(&logits)?.matmul(v)
}

/// Keyword-guided enhancement of visual tokens: `softmax(V Xᵀ / √d) X`.
///
/// Visual tokens act as queries, keyword embeddings as keys and values, so
/// every output row is a convex combination of keyword rows.
pub fn cross_attention_enhance(v: &Matrix, x: &Matrix) -> Result<Matrix, TensorError> {
    if x.rows == 0 || x.cols == 0 {
        return invalid("no keyword embeddings");
    }
    if v.cols != x.cols {
        return invalid(format!(
            "visual dim {} differs from keyword dim {}",
            v.cols, x.cols
        ));
    }
    let scale = 1.0 / (x.cols as f64).sqrt();
    let weights = softmax_rows(&v.matmul(&x.transpose())?.scale(scale))?;
    weights.matmul(x)
}

/// How enhanced visual tokens replace the originals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhanceMode {
    /// `V'` replaces `V`.
    #[default]
    Replace,
    /// `V + V'`.
    Residual,
}

pub fn enhance_visual_tokens(
    v: &Matrix,
    x: &Matrix,
    mode: EnhanceMode,
) -> Result<Matrix, TensorError> {
    let enhanced = cross_attention_enhance(v, x)?;
    match mode {
        EnhanceMode::Replace => Ok(enhanced),
        EnhanceMode::Residual => v.add(&enhanced),
    }
}

/// Shannon entropy divided by `ln M`, in `[0, 1]`. A single-entry
/// distribution has entropy 0.
pub fn normalized_entropy(p: &ProbVector) -> f64 {
    let m = p.len();
    if m <= 1 {
        return 0.0;
    }
    let h: f64 = p
        .as_slice()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    (h / (m as f64).ln()).clamp(0.0, 1.0)
}

/// Validating wrapper over [`normalized_entropy`] for raw slices.
pub fn normalized_entropy_of(values: &[f64]) -> Result<f64, TensorError> {
    Ok(normalized_entropy(&ProbVector::new(values.to_vec())?))
}
