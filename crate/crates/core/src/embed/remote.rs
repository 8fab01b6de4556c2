use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbeddingVector, Embedder};

pub const DEFAULT_EMBED_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: [&'a str; 1],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Client for an embeddings endpoint speaking
/// `POST {model, input:[text]}` → `{data:[{embedding:[…]}]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            agent,
        }
    }

    fn unavailable(&self, reason: impl Into<String>) -> EmbedError {
        EmbedError::EndpointUnavailable {
            endpoint: self.endpoint.clone(),
            attempts: 1,
            reason: reason.into(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = EmbedRequest {
            model: &self.model,
            input: [text],
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| self.unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(self.unavailable(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(EmbedError::MalformedResponse(format!("HTTP {status}")));
        }
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::MalformedResponse(e.to_string()))?;
        let datum = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::MalformedResponse("empty `data` array".into()))?;
        EmbeddingVector::new(self.model.clone(), datum.embedding)
    }
}
