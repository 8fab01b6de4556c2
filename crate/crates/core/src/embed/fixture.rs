use std::collections::HashMap;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{EmbedError, EmbeddingVector, Embedder};
use crate::schema::canonical_vocabulary;

/// One standard basis vector per canonical field text.
///
/// Cosine is exactly 1 for equal strings and 0 otherwise, which turns
/// action-aware similarity into plain weight arithmetic.
#[derive(Debug, Clone)]
pub struct OneHotEmbedder {
    index: HashMap<String, usize>,
}

impl OneHotEmbedder {
    pub const MODEL_ID: &'static str = "fixture-onehot";

    pub fn new() -> Self {
        let index = canonical_vocabulary()
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        Self { index }
    }

    pub fn dims(&self) -> usize {
        self.index.len()
    }
}

impl Default for OneHotEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl Embedder for OneHotEmbedder {
    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let pos = *self
            .index
            .get(text)
            .ok_or_else(|| EmbedError::UnknownVocabularyString(text.to_string()))?;
        let mut values = vec![0.0; self.dims()];
        values[pos] = 1.0;
        EmbeddingVector::new(Self::MODEL_ID, values)
    }
}

/// Seeded pseudo-random unit vectors derived from SHA-256 in counter mode.
///
/// Only integer hashing, multiplication, addition and `sqrt` are involved, so
/// vectors are bit-identical across platforms.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    seed: u64,
    dims: usize,
    model_id: String,
}

impl HashedEmbedder {
    pub fn new(seed: u64, dims: usize) -> Result<Self, EmbedError> {
        if dims < 8 {
            return Err(EmbedError::DimensionMismatch {
                expected: 8,
                got: dims,
            });
        }
        Ok(Self {
            seed,
            dims,
            model_id: format!("fixture-hashed-{seed}-{dims}"),
        })
    }
}

impl Embedder for HashedEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut values = Vec::with_capacity(self.dims);
        let mut block = 0u64;
        while values.len() < self.dims {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update((text.len() as u64).to_le_bytes());
            h.update(text.as_bytes());
            h.update(block.to_le_bytes());
            let digest = h.finalize();
            for word in digest.chunks_exact(8) {
                if values.len() == self.dims {
                    break;
                }
                let bits = u64::from_le_bytes(word.try_into().expect("8-byte chunk"));
                // 53 random mantissa bits mapped to [-1, 1)
                let unit = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                values.push(2.0 * unit - 1.0);
            }
            block += 1;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector::new(self.model_id.clone(), values)
    }
}

/// Wraps another embedder and sleeps before every call. Used to emulate
/// remote-call latency in runtime accounting tests.
pub struct DelayedEmbedder<E> {
    inner: E,
    delay: Duration,
}

impl<E> DelayedEmbedder<E> {
    pub fn new(inner: E, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<E: Embedder> Embedder for DelayedEmbedder<E> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        std::thread::sleep(self.delay);
        self.inner.embed(text)
    }
}
