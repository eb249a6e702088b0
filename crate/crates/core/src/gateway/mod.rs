//! Language-model gateway.
//!
//! Every prompt in the crate goes through [`chat`] and every embedding
//! through [`embed`]. Backends implement [`ChatBackend`] / [`EmbedBackend`];
//! [`MockBackend`] is a deterministic offline implementation of both.

mod hashed;
mod live;
mod mock;
mod retry;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use hashed::HashedEmbedder;
pub use live::{LiveBackend, LiveConfig};
pub use mock::{ChatRule, EmbedRule, Fallback, MockBackend};
pub use retry::RetryPolicy;

pub const API_KEY_ENV: &str = "MNEMO_API_KEY";
pub const DEFAULT_EMBEDDING_DIM: usize = 256;

/// Sampling temperature for summarizer and judge calls.
pub const JUDGE_TEMPERATURE: f64 = 0.0;
/// Sampling temperature for dialogue generation.
pub const DIALOGUE_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts: {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn tag(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>, temperature: f64) -> Self {
        Self { messages, temperature, max_tokens: 1024, seed: None }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self.messages.first().ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest("first message must be a system or user message".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be > 0".into()));
        }
        Ok(())
    }

    /// Content of the system message, if the request opens with one.
    pub fn system_text(&self) -> Option<&str> {
        self.messages.first().filter(|m| m.role == Role::System).map(|m| m.content.as_str())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    /// Stable hex digest over roles, texts, temperature and max_tokens.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

/// SHA-256 over a length-prefixed encoding, so no two distinct message lists
/// share a byte stream. The seed is deliberately excluded.
pub fn fingerprint(request: &GenerationRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update((request.messages.len() as u64).to_le_bytes());
    for m in &request.messages {
        let tag = m.role.tag().as_bytes();
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag);
        hasher.update((m.content.len() as u64).to_le_bytes());
        hasher.update(m.content.as_bytes());
    }
    hasher.update(request.temperature.to_bits().to_le_bytes());
    hasher.update(request.max_tokens.to_le_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        let v = Self { values };
        let norm = v.norm();
        if v.values.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Protocol("embedding must be non-empty with finite, non-zero norm".into()));
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { values: self.values.iter().map(|x| x / n).collect() }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError>;
}

pub trait EmbedBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: EmbedBackend + ?Sized> EmbedBackend for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        (**self).embed_texts(texts)
    }
}

/// Validates the request, calls the backend and rejects blank completions.
pub fn chat(backend: &dyn ChatBackend, request: &GenerationRequest) -> Result<String, GatewayError> {
    request.validate()?;
    let text = backend.complete(request)?;
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyCompletion);
    }
    Ok(text)
}

pub fn embed(backend: &dyn EmbedBackend, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(GatewayError::InvalidRequest(format!("text {i} is empty")));
    }
    let out = backend.embed_texts(texts)?;
    if out.len() != texts.len() {
        return Err(GatewayError::Protocol(format!("expected {} embeddings, got {}", texts.len(), out.len())));
    }
    let dim = backend.dim();
    if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
        return Err(GatewayError::Protocol(format!("embedding dim {} != configured {dim}", bad.dim())));
    }
    Ok(out)
}

/// Closure-backed chat backend, handy for scripted judges in tests.
pub struct FnChat<F>(pub F);

impl<F> ChatBackend for FnChat<F>
where
    F: Fn(&GenerationRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        (self.0)(request)
    }
}

/// Wraps a chat backend and keeps every request it forwards.
pub struct Recorder<B> {
    inner: B,
    log: Mutex<Vec<GenerationRequest>>,
}

impl<B: ChatBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("recorder lock").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("recorder lock").clear();
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GatewayError> {
        self.log.lock().expect("recorder lock").push(request.clone());
        self.inner.complete(request)
    }
}
