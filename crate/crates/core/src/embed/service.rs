use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{EmbedCache, EmbedError, EmbeddingVector, Embedder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubled on each subsequent one.
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Counters over the lifetime of an [`EmbeddingService`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EmbedStats {
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Wall time of every backend call, in milliseconds.
    pub call_ms: Vec<f64>,
}

/// Cache-fronted embedder with retry and dimension tracking.
pub struct EmbeddingService {
    backend: Arc<dyn Embedder>,
    cache: EmbedCache,
    retry: RetryPolicy,
    dims: Mutex<Option<usize>>,
    stats: Mutex<EmbedStats>,
}

impl EmbeddingService {
    pub fn new(backend: Arc<dyn Embedder>, cache: EmbedCache, retry: RetryPolicy) -> Self {
        Self {
            backend,
            cache,
            retry,
            dims: Mutex::new(None),
            stats: Mutex::new(EmbedStats::default()),
        }
    }

    pub fn in_memory(backend: Arc<dyn Embedder>) -> Self {
        Self::new(backend, EmbedCache::in_memory(), RetryPolicy::default())
    }

    pub fn stats(&self) -> EmbedStats {
        self.stats.lock().clone()
    }

    pub fn cache(&self) -> &EmbedCache {
        &self.cache
    }

    /// True when the text is already cached (memory or disk).
    pub fn is_cached(&self, text: &str) -> Result<bool, EmbedError> {
        Ok(self.cache.get(self.backend.model_id(), text)?.is_some())
    }

    fn check_dims(&self, v: &EmbeddingVector) -> Result<(), EmbedError> {
        let mut dims = self.dims.lock();
        match *dims {
            Some(expected) if expected != v.dims() => Err(EmbedError::DimensionMismatch {
                expected,
                got: v.dims(),
            }),
            Some(_) => Ok(()),
            None => {
                *dims = Some(v.dims());
                Ok(())
            }
        }
    }

    fn call_backend(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut attempt = 0u32;
        loop {
            let start = Instant::now();
            let result = self.backend.embed(text);
            self.stats
                .lock()
                .call_ms
                .push(start.elapsed().as_secs_f64() * 1e3);
            match result {
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "embedding call failed, retrying");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(EmbedError::EndpointUnavailable {
                    endpoint, reason, ..
                }) => {
                    return Err(EmbedError::EndpointUnavailable {
                        endpoint,
                        attempts: attempt + 1,
                        reason,
                    })
                }
                other => return other,
            }
        }
    }
}

impl Embedder for EmbeddingService {
    fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        if let Some(v) = self.cache.get(self.backend.model_id(), text)? {
            self.check_dims(&v)?;
            self.stats.lock().cache_hits += 1;
            return Ok(v);
        }
        self.stats.lock().cache_misses += 1;
        let v = self.call_backend(text)?;
        self.check_dims(&v)?;
        self.cache.insert(text, &v)?;
        Ok(v)
    }
}
