use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::{ContentPart, Prompt};

pub const DEFAULT_VLM_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

/// Wire body: `{model, messages:[{role, content:[…]}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn from_prompt(model: &str, prompt: &Prompt) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: vec![ContentPart::text(&prompt.system)],
                },
                ChatMessage {
                    role: Role::User,
                    content: prompt.user_parts.clone(),
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VlmError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
}

/// A vision-language endpoint returning the assistant's text reply.
pub trait VlmClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, VlmError>;
}

impl<C: VlmClient + ?Sized> VlmClient for std::sync::Arc<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String, VlmError> {
        (**self).complete(request)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

/// HTTP client for `POST {model, messages}` → `{choices:[{message:{content}}]}`.
pub struct HttpVlmClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpVlmClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl VlmClient for HttpVlmClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, VlmError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| VlmError::Unavailable(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(VlmError::Unavailable(format!("{}: HTTP {status}", self.endpoint)));
        }
        if !(200..300).contains(&status) {
            return Err(VlmError::Malformed(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| VlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| VlmError::Malformed("empty `choices` array".into()))
    }
}

/// Replays canned replies in order and records every request. Optionally
/// sleeps before each reply to emulate endpoint latency.
#[derive(Default)]
pub struct ScriptedVlm {
    replies: Mutex<VecDeque<Result<String, VlmError>>>,
    requests: Mutex<Vec<ChatRequest>>,
    delay: Duration,
}

impl ScriptedVlm {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(replies.into_iter().map(|r| Ok(r.into())))
    }

    pub fn with_results(replies: impl IntoIterator<Item = Result<String, VlmError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
            delay: Duration::ZERO,
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn push(&self, reply: impl Into<String>) {
        self.replies.lock().push_back(Ok(reply.into()));
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().clone()
    }

    pub fn call_count(&self) -> usize {
        self.requests.lock().len()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().len()
    }
}

impl VlmClient for ScriptedVlm {
    fn complete(&self, request: &ChatRequest) -> Result<String, VlmError> {
        self.requests.lock().push(request.clone());
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        self.replies
            .lock()
            .pop_front()
            .unwrap_or_else(|| Err(VlmError::Unavailable("script exhausted".into())))
    }
}
