//! Procedural-state extraction from an observation, the task instruction and
//! the deduplicated interaction history.

mod client;
mod prompt;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    ChatMessage, ChatRequest, HttpVlmClient, Role, ScriptedVlm, VlmClient, VlmError,
    DEFAULT_VLM_TIMEOUT,
};
pub use prompt::{build_prompt, system_prompt, ContentPart, Prompt};

use crate::schema::{dedup_history, HistoryEntry, ProceduralState, SchemaError};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("invalid extraction request: {0}")]
    InvalidRequest(String),
    #[error("extraction failed after {attempts} attempt(s): {last}")]
    ExtractionFailed { attempts: usize, last: String },
    #[error("extractor endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("step index {got} does not follow {last}")]
    NonMonotonicStep { last: u64, got: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageData {
    pub media_type: String,
    pub bytes: Vec<u8>,
}

impl ImageData {
    pub fn new(media_type: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            media_type: media_type.into(),
            bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionRequest {
    pub observation: ImageData,
    pub instruction: String,
    pub history: Vec<HistoryEntry>,
}

impl ExtractionRequest {
    /// The history is deduplicated here, so callers may pass it raw.
    pub fn new(
        observation: ImageData,
        instruction: impl Into<String>,
        history: Vec<HistoryEntry>,
    ) -> Result<Self, ExtractError> {
        let instruction = instruction.into();
        if instruction.trim().is_empty() {
            return Err(ExtractError::InvalidRequest("instruction is empty".into()));
        }
        Ok(Self {
            observation,
            instruction,
            history: dedup_history(&history),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Reuse the most recent history state.
    #[default]
    PreviousState,
    /// Tell the runtime to skip adaptation for this chunk.
    BaseOnly,
    Fail,
}

impl std::str::FromStr for FallbackPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "previous_state" => Ok(Self::PreviousState),
            "base_only" => Ok(Self::BaseOnly),
            "fail" => Ok(Self::Fail),
            other => Err(format!("unknown fallback policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub endpoint: String,
    pub model: String,
    pub max_retries: u32,
    #[serde(with = "secs_f64")]
    pub timeout: Duration,
    pub fallback_policy: FallbackPolicy,
}

mod secs_f64 {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "vlm".into(),
            max_retries: 2,
            timeout: DEFAULT_VLM_TIMEOUT,
            fallback_policy: FallbackPolicy::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn check(&self) -> Result<(), ExtractError> {
        if self.timeout.is_zero() {
            return Err(ExtractError::InvalidRequest("timeout must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of one endpoint call.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Valid,
    Malformed(String),
    InvalidState(String),
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attempt {
    pub elapsed_ms: f64,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "state", rename_all = "snake_case")]
pub enum Extracted {
    State(ProceduralState),
    /// Adaptation should be skipped; the policy runs on base parameters.
    BaseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractOutcome {
    pub extracted: Extracted,
    pub attempts: Vec<Attempt>,
    /// Set when the state came from the fallback policy.
    pub fallback: Option<FallbackPolicy>,
}

impl ExtractOutcome {
    pub fn state(&self) -> Option<&ProceduralState> {
        match &self.extracted {
            Extracted::State(s) => Some(s),
            Extracted::BaseOnly => None,
        }
    }
}

/// Returns the contents of the first fenced block if there is one, else the
/// trimmed reply.
pub fn strip_code_fence(reply: &str) -> &str {
    let Some(open) = reply.find("```") else {
        return reply.trim();
    };
    let after = &reply[open + 3..];
    // skip an optional info string such as `json`
    let body = match after.find('\n') {
        Some(nl) if after[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => &after[nl + 1..],
        _ => after,
    };
    match body.find("```") {
        Some(close) => body[..close].trim(),
        None => body.trim(),
    }
}

enum ReplyError {
    Malformed(String),
    Invalid(SchemaError),
}

fn parse_reply(reply: &str) -> Result<ProceduralState, ReplyError> {
    let body = strip_code_fence(reply);
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ReplyError::Malformed(e.to_string()))?;
    if !value.is_object() {
        return Err(ReplyError::Malformed("reply is not a JSON object".into()));
    }
    ProceduralState::from_json_value(&value).map_err(ReplyError::Invalid)
}

fn correction_notice(reason: &str) -> ChatMessage {
    ChatMessage {
        role: Role::User,
        content: vec![ContentPart::text(format!(
            "Your previous reply was rejected ({reason}); reply with ONE strictly valid JSON object using only the allowed enum values."
        ))],
    }
}

/// Sends the prompt, validates the reply, retries with a correction notice on
/// invalid replies and applies the fallback policy once retries are exhausted.
/// Transport failures share the same attempt budget; if the final attempt
/// failed in transport the error is `EndpointUnavailable` regardless of policy.
pub fn extract_state<C: VlmClient + ?Sized>(
    req: &ExtractionRequest,
    cfg: &ExtractorConfig,
    client: &C,
) -> Result<ExtractOutcome, ExtractError> {
    cfg.check()?;
    let base = ChatRequest::from_prompt(&cfg.model, &build_prompt(req));
    let mut attempts = Vec::new();
    let mut notice: Option<ChatMessage> = None;

    for _ in 0..=cfg.max_retries {
        let mut request = base.clone();
        request.messages.extend(notice.take());
        let start = Instant::now();
        let result = client.complete(&request);
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        let outcome = match result {
            Err(VlmError::Unavailable(e)) => AttemptOutcome::Unavailable(e),
            Err(VlmError::Malformed(e)) => AttemptOutcome::Malformed(e),
            Ok(reply) => match parse_reply(&reply) {
                Ok(state) => {
                    attempts.push(Attempt {
                        elapsed_ms,
                        outcome: AttemptOutcome::Valid,
                    });
                    return Ok(ExtractOutcome {
                        extracted: Extracted::State(state),
                        attempts,
                        fallback: None,
                    });
                }
                Err(ReplyError::Malformed(e)) => AttemptOutcome::Malformed(e),
                Err(ReplyError::Invalid(e)) => AttemptOutcome::InvalidState(e.to_string()),
            },
        };
        notice = match &outcome {
            AttemptOutcome::Malformed(e) | AttemptOutcome::InvalidState(e) => Some(correction_notice(e)),
            _ => None,
        };
        tracing::debug!(?outcome, "extraction attempt failed");
        attempts.push(Attempt { elapsed_ms, outcome });
    }

    let last = attempts.last().expect("at least one attempt");
    let last_reason = match &last.outcome {
        AttemptOutcome::Unavailable(e) => return Err(ExtractError::EndpointUnavailable(e.clone())),
        AttemptOutcome::Malformed(e) | AttemptOutcome::InvalidState(e) => e.clone(),
        AttemptOutcome::Valid => unreachable!("valid attempts return early"),
    };
    let failed = |attempts: &Vec<Attempt>| ExtractError::ExtractionFailed {
        attempts: attempts.len(),
        last: last_reason.clone(),
    };
    let extracted = match cfg.fallback_policy {
        FallbackPolicy::Fail => return Err(failed(&attempts)),
        FallbackPolicy::BaseOnly => Extracted::BaseOnly,
        FallbackPolicy::PreviousState => match req.history.last() {
            Some(entry) => Extracted::State(entry.state.clone()),
            None => return Err(failed(&attempts)),
        },
    };
    Ok(ExtractOutcome {
        extracted,
        attempts,
        fallback: Some(cfg.fallback_policy),
    })
}

/// Appends a step and re-applies consecutive-duplicate removal.
pub fn record_step(
    history: &[HistoryEntry],
    step_index: u64,
    observation_ref: impl Into<String>,
    state: ProceduralState,
) -> Result<Vec<HistoryEntry>, ExtractError> {
    if let Some(last) = history.last() {
        if step_index <= last.step_index {
            return Err(ExtractError::NonMonotonicStep {
                last: last.step_index,
                got: step_index,
            });
        }
    }
    let mut next = history.to_vec();
    next.push(HistoryEntry {
        step_index,
        observation_ref: observation_ref.into(),
        state,
    });
    Ok(dedup_history(&next))
}
