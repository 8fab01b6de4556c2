//! Text embeddings for field-value matching.
//!
//! [`Embedder`] is the single abstraction the matcher depends on. Concrete
//! implementations are the deterministic fixtures (one-hot over the closed
//! field vocabulary, seeded hashing), the HTTP client for a remote embedding
//! service, and [`EmbeddingService`], which layers a content-addressed cache,
//! retries and call accounting over any of them.

mod cache;
mod fixture;
mod remote;
mod service;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, EmbedCache};
pub use fixture::{DelayedEmbedder, HashedEmbedder, OneHotEmbedder};
pub use remote::{HttpEmbedder, DEFAULT_EMBED_TIMEOUT};
pub use service::{EmbedStats, EmbeddingService, RetryPolicy};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding input text is empty")]
    EmptyText,
    #[error("embedding endpoint {endpoint} unavailable after {attempts} attempt(s): {reason}")]
    EndpointUnavailable {
        endpoint: String,
        attempts: u32,
        reason: String,
    },
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("text {0:?} is outside the fixture vocabulary")]
    UnknownVocabularyString(String),
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

impl EmbedError {
    /// Transient failures are retried by [`EmbeddingService`].
    pub fn is_transient(&self) -> bool {
        matches!(self, EmbedError::EndpointUnavailable { .. })
    }
}

/// Dense embedding of one text under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub model_id: String,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(model_id: impl Into<String>, values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self {
            model_id: model_id.into(),
            values,
        })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Anything that turns a text into a vector.
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        (**self).embed(text)
    }
}

/// Cosine similarity in double precision.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.dims() != v.dims() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.dims(),
            got: v.dims(),
        });
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.values.iter().zip(&v.values) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}
