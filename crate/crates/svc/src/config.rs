use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use procmem_core::embed::{
    Embedder, EmbeddingService, EmbedCache, HashedEmbedder, HttpEmbedder, OneHotEmbedder,
    RetryPolicy,
};
use procmem_core::extract::{ExtractorConfig, FallbackPolicy, HttpVlmClient, VlmClient};
use procmem_core::fuse::FusionMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_BANK: &str = "PROCMEM_BANK";
pub const ENV_EMBED_ENDPOINT: &str = "PROCMEM_EMBED_ENDPOINT";
pub const ENV_VLM_ENDPOINT: &str = "PROCMEM_VLM_ENDPOINT";
pub const ENV_CACHE_DIR: &str = "PROCMEM_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("parsing {0}: {1}")]
    Parse(String, String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedBackend {
    #[default]
    Onehot,
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    pub backend: EmbedBackend,
    pub endpoint: Option<String>,
    /// Model name sent to the remote endpoint; also its model id.
    pub model: String,
    pub hash_seed: u64,
    pub hash_dims: usize,
    pub timeout_secs: f64,
    pub max_retries: u32,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self {
            backend: EmbedBackend::Onehot,
            endpoint: None,
            model: "text-embedding".into(),
            hash_seed: 0,
            hash_dims: 64,
            timeout_secs: 10.0,
            max_retries: RetryPolicy::default().max_retries,
        }
    }
}

impl EmbedSettings {
    pub fn backend(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self.backend {
            EmbedBackend::Onehot => Arc::new(OneHotEmbedder::new()),
            EmbedBackend::Hashed => Arc::new(
                HashedEmbedder::new(self.hash_seed, self.hash_dims)
                    .map_err(|e| ConfigError::Invalid(format!("embed.hash_dims: {e}")))?,
            ),
            EmbedBackend::Remote => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    ConfigError::Invalid(format!("embed.backend = remote needs embed.endpoint or {ENV_EMBED_ENDPOINT}"))
                })?;
                Arc::new(HttpEmbedder::new(endpoint, &self.model, secs(self.timeout_secs)?))
            }
        })
    }

    /// The id the configured backend reports, without contacting it.
    pub fn model_id(&self) -> Result<String, ConfigError> {
        match self.backend {
            EmbedBackend::Remote => Ok(self.model.clone()),
            _ => Ok(self.backend()?.model_id().to_string()),
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSettings {
    pub endpoint: Option<String>,
    pub model: String,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub fallback_policy: FallbackPolicy,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        let d = ExtractorConfig::default();
        Self {
            endpoint: None,
            model: d.model,
            max_retries: d.max_retries,
            timeout_secs: d.timeout.as_secs_f64(),
            fallback_policy: d.fallback_policy,
        }
    }
}

impl ExtractorSettings {
    pub fn config(&self) -> Result<ExtractorConfig, ConfigError> {
        Ok(ExtractorConfig {
            endpoint: self.endpoint.clone().unwrap_or_default(),
            model: self.model.clone(),
            max_retries: self.max_retries,
            timeout: secs(self.timeout_secs)?,
            fallback_policy: self.fallback_policy,
        })
    }

    /// `None` when no endpoint is configured.
    pub fn client(&self) -> Result<Option<Arc<dyn VlmClient>>, ConfigError> {
        let timeout = secs(self.timeout_secs)?;
        Ok(self
            .endpoint
            .as_ref()
            .map(|e| Arc::new(HttpVlmClient::new(e, timeout)) as Arc<dyn VlmClient>))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub k: usize,
    pub temperature: f64,
    pub mode: FusionMode,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            k: 1,
            temperature: 1.0,
            mode: FusionMode::Factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub bank: PathBuf,
    /// Embedding cache; defaults to `<bank>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Where `/v1/fuse` writes fused adapters; defaults to `<bank>/artifacts`.
    pub artifacts_dir: Option<PathBuf>,
    pub embed: EmbedSettings,
    pub extractor: ExtractorSettings,
    pub defaults: Defaults,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: ([127, 0, 0, 1], 8750).into(),
            bank: PathBuf::from("bank"),
            cache_dir: None,
            artifacts_dir: None,
            embed: EmbedSettings::default(),
            extractor: ExtractorSettings::default(),
            defaults: Defaults::default(),
        }
    }
}

fn secs(v: f64) -> Result<Duration, ConfigError> {
    Duration::try_from_secs_f64(v)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| ConfigError::Invalid(format!("timeout {v} must be a positive number of seconds")))
}

impl ServiceConfig {
    pub fn from_toml_str(s: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(origin.to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Applies the `PROCMEM_*` overrides; they win over the file.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let get = |k: &str| lookup(k).filter(|v| !v.is_empty());
        if let Some(v) = get(ENV_BANK) {
            self.bank = v.into();
        }
        if let Some(v) = get(ENV_EMBED_ENDPOINT) {
            self.embed.endpoint = Some(v);
        }
        if let Some(v) = get(ENV_VLM_ENDPOINT) {
            self.extractor.endpoint = Some(v);
        }
        if let Some(v) = get(ENV_CACHE_DIR) {
            self.cache_dir = Some(v.into());
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.defaults.k == 0 {
            return Err(ConfigError::Invalid("defaults.k must be >= 1".into()));
        }
        if !(self.defaults.temperature.is_finite() && self.defaults.temperature > 0.0) {
            return Err(ConfigError::Invalid("defaults.temperature must be positive".into()));
        }
        secs(self.embed.timeout_secs)?;
        secs(self.extractor.timeout_secs)?;
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.bank.join("cache"))
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.artifacts_dir.clone().unwrap_or_else(|| self.bank.join("artifacts"))
    }

    pub fn embedding_service(&self) -> Result<EmbeddingService, ConfigError> {
        let dir = self.cache_dir();
        let cache = EmbedCache::persistent(&dir).map_err(|e| ConfigError::Io(dir.display().to_string(), e))?;
        Ok(EmbeddingService::new(self.embed.backend()?, cache, self.embed.retry()))
    }
}
