//! Model backends.
//!
//! A backend answers one chain step at a time. Requests carry the question,
//! accumulated textual context and an optional additive bias over visual
//! tokens; responses return the answer, a confidence and (on request) raw
//! keyword attention rows from the last decoder layers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod wire;

#[cfg(feature = "http")]
pub use http::HttpBackend;
pub use mock::{MockBackend, SceneSpec};
pub use wire::{validate_wire, Direction, WireError, WireMessage};

/// Image given by reference (scene id, path) or inline as base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageSource {
    #[serde(rename = "image_ref")]
    Ref(String),
    #[serde(rename = "image_b64")]
    Inline(String),
}

impl ImageSource {
    pub fn describe(&self) -> &str {
        match self {
            ImageSource::Ref(r) => r,
            ImageSource::Inline(_) => "<inline image>",
        }
    }
}

/// Sparse additive bias over visual tokens, already scaled by α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Bias {
    /// Keeps the nonzero entries of a dense bias.
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, weights) = dense
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| (i, *w))
            .unzip();
        Self { indices, weights }
    }

    pub fn to_dense(&self, m: usize) -> Result<Vec<f64>, BackendError> {
        let mut dense = vec![0.0; m];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            let slot = dense.get_mut(i).ok_or_else(|| {
                BackendError::InvalidRequest(format!("bias index {i} outside {m} visual tokens"))
            })?;
            *slot += w;
        }
        Ok(dense)
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Bias mass landing on the given token set.
    pub fn mass_on(&self, tokens: &BTreeSet<usize>) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .filter(|(i, _)| tokens.contains(i))
            .map(|(_, w)| w)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Enhance {
    pub enabled: bool,
    pub keywords: Vec<String>,
    /// Add enhanced tokens to the originals instead of replacing them.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    #[serde(flatten)]
    pub image: ImageSource,
    pub question: String,
    pub keywords: Vec<String>,
    pub context: Vec<ContextTurn>,
    pub bias: Option<Bias>,
    pub enhance: Enhance,
    pub want_attention: bool,
}

impl BackendRequest {
    /// A bare question: no context, bias, enhancement or attention.
    pub fn plain(image_ref: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            image: ImageSource::Ref(image_ref.into()),
            question: question.into(),
            keywords: Vec::new(),
            context: Vec::new(),
            bias: None,
            enhance: Enhance::default(),
            want_attention: false,
        }
    }
}

/// `attention[layer][keyword_token][visual_token]`
pub type AttentionLayers = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub answer: String,
    pub confidence: f64,
    pub visual_token_count: usize,
    pub attention: Option<AttentionLayers>,
    pub warnings: Vec<String>,
    /// Patch grid `[rows, cols]` when the server knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("image not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request to {endpoint} timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: u32 },
    #[error("connection to {endpoint} failed after {attempts} attempt(s): {message}")]
    Connection {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response schema violation: {error}")]
    Schema { error: WireError, body: String },
}

/// Something that can answer a chain step.
pub trait Backend: Send + Sync {
    fn step(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn step(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).step(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn step(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).step(req)
    }
}
