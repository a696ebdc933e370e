//! Uniform chat-completion interface over a real OpenAI-compatible HTTP
//! backend and a deterministic mock backend, plus a content-addressed
//! response cache.
//!
//! All LLM traffic in the crate goes through [`ChatBackend::complete`].
//! Backends expose a call counter so tests can assert that warm-cache runs
//! issue zero backend calls.

mod cache;
mod http;
mod mock;

pub use cache::CachedBackend;
pub use http::{HttpBackend, HttpConfig};
pub use mock::{MockBackend, RequestKind};

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default chat model used when the config does not name one.
pub const DEFAULT_MODEL: &str = "mixtral-8x7b";
/// Default completion budget; the source method never states one.
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// One chat-completion exchange unit. Cache keys cover every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Single-user-message request, the common shape in this crate.
    pub fn user(model: impl Into<String>, content: impl Into<String>, temperature: f64, seed: u64) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage::user(content)],
            temperature,
            seed,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be non-empty".into()));
        }
        if self.messages[0].role == Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message role must be system or user".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be a real number >= 0".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub content: String,
    pub backend_id: String,
    pub cached: bool,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("backend returned empty model output")]
    EmptyOutput,
    #[error("http status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("response missing choices[0].message.content")]
    MalformedResponse,
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A chat-completion provider. Implementations must be safe for concurrent
/// callers.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError>;

    /// Stable identifier, included in cache keys.
    fn id(&self) -> String;

    /// Number of completed (non-cached) backend calls so far.
    fn calls(&self) -> u64;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError> {
        (**self).complete(request)
    }

    fn id(&self) -> String {
        (**self).id()
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

/// Canonical message serialization used for cache keys and for the mock's
/// message digest: `role + "\n" + content`, records joined by the record
/// separator byte 0x1e. Implementation-independent by construction.
pub fn canonical_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for (i, message) in messages.iter().enumerate() {
        if i > 0 {
            out.push('\x1e');
        }
        out.push_str(message.role.as_str());
        out.push('\n');
        out.push_str(&message.content);
    }
    out
}

/// Hex SHA-256 cache key over backend id, model, canonical messages,
/// temperature (shortest round-trip decimal form), seed, and max_tokens.
pub fn cache_key(backend_id: &str, request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    let sep = [0x1fu8];
    hasher.update(backend_id.as_bytes());
    hasher.update(sep);
    hasher.update(request.model.as_bytes());
    hasher.update(sep);
    hasher.update(canonical_messages(&request.messages).as_bytes());
    hasher.update(sep);
    hasher.update(format!("{:?}", request.temperature).as_bytes());
    hasher.update(sep);
    hasher.update(request.seed.to_string().as_bytes());
    hasher.update(sep);
    hasher.update(request.max_tokens.to_string().as_bytes());
    let digest = hasher.finalize();
    let mut key = String::with_capacity(64);
    for byte in digest {
        key.push_str(&format!("{byte:02x}"));
    }
    key
}
