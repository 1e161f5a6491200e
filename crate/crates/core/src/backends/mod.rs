//! Chat-completion and embedding providers.
//!
//! Backends implement a single attempt ([`ChatBackend::send`],
//! [`EmbeddingBackend::embed_once`]). Retries with exponential backoff and
//! full jitter live in [`chat_complete`] and [`embed`], so every provider gets
//! the same policy.

mod openai;
mod retry;
mod scripted;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use openai::{OpenAiCompatClient, OpenAiConfig, DEFAULT_API_KEY_ENV};
pub use retry::{RetryPolicy, Sleeper, ThreadSleeper};
pub use scripted::{FaultInjector, FaultKind, HashEmbedder, ScriptedBackend};

pub const DEFAULT_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 2000;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    /// Sent as the only (user) message.
    pub prompt: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}
fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sampling parameters without a prompt; what agents carry around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatDefaults {
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

impl ChatDefaults {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest {
            model_id: self.model_id.clone(),
            prompt: prompt.into(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
        }
    }
}

/// Result of one successful backend attempt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChatReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl ChatReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub attempts_used: u32,
}

/// Failure of a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttemptError {
    /// Timeouts, 5xx, 429, connection failures.
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("permanent backend error: {0}")]
    PermanentBackendError(String),
    #[error("no embedding backend configured")]
    EmbeddingUnavailable,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError> {
        (**self).send(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, AttemptError> {
        (**self).send(request)
    }
}

pub fn chat_complete(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    retry: &RetryPolicy,
) -> Result<ChatResponse, BackendError> {
    chat_complete_with(backend, request, retry, &ThreadSleeper)
}

/// [`chat_complete`] with an explicit sleeper, so tests can observe delays
/// instead of waiting them out.
pub fn chat_complete_with(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    retry: &RetryPolicy,
    sleeper: &dyn Sleeper,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let (reply, attempts_used) = retry.run(sleeper, || backend.send(request))?;
    Ok(ChatResponse {
        text: reply.text,
        prompt_tokens: reply.prompt_tokens,
        completion_tokens: reply.completion_tokens,
        attempts_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Sentence,
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model_id: String,
    pub inputs: Vec<String>,
    pub granularity: Granularity,
}

/// Sentence granularity yields one single-vector list per input; token
/// granularity one vector per token.
pub type Embeddings = Vec<Vec<Vec<f64>>>;

pub trait EmbeddingBackend: Send + Sync {
    fn dimension(&self) -> Option<usize> {
        None
    }

    fn embed_once(&self, request: &EmbeddingRequest) -> Result<Embeddings, AttemptError>;
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }

    fn embed_once(&self, request: &EmbeddingRequest) -> Result<Embeddings, AttemptError> {
        (**self).embed_once(request)
    }
}

pub fn embed(
    backend: Option<&dyn EmbeddingBackend>,
    request: &EmbeddingRequest,
    retry: &RetryPolicy,
) -> Result<Embeddings, BackendError> {
    let backend = backend.ok_or(BackendError::EmbeddingUnavailable)?;
    if request.inputs.is_empty() {
        return Err(BackendError::InvalidRequest(
            "embedding inputs empty".into(),
        ));
    }
    let (out, _) = retry.run(&ThreadSleeper, || backend.embed_once(request))?;
    if out.len() != request.inputs.len() {
        return Err(BackendError::PermanentBackendError(format!(
            "expected {} embeddings, got {}",
            request.inputs.len(),
            out.len()
        )));
    }
    Ok(out)
}

pub(crate) fn duration_ms(ms: u64) -> Duration {
    Duration::from_millis(ms)
}
