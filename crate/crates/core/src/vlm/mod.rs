//! Chat client for OpenAI-compatible completion endpoints with image
//! attachments, plus offline backends (fixture replay, recording, scripted).

mod http;
mod offline;
mod parse;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpClient;
pub use offline::{FixtureClient, RecordingClient, ScriptedClient};
pub use parse::parse_score_mapping;

pub const EVALUATOR_TEMPERATURE: f64 = 0.2;
pub const PROPOSER_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("api error {status}: {body}")]
    Api { status: u16, body: String },
    #[error("could not parse reply ({message}); raw reply: {raw}")]
    Parse { message: String, raw: String },
    #[error("no fixture for request {digest} in {dir}")]
    MissingFixture { digest: String, dir: String },
    #[error("invalid client configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
    /// PNG payloads.
    pub images: Vec<Vec<u8>>,
}

impl fmt::Debug for ChatMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatMessage")
            .field("role", &self.role)
            .field("text", &self.text)
            .field("images", &self.images.len())
            .finish()
    }
}

impl ChatMessage {
    pub fn new(role: Role, text: impl Into<String>, images: Vec<Vec<u8>>) -> Self {
        Self { role, text: text.into(), images }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, text, Vec::new())
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text, Vec::new())
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, text, Vec::new())
    }

    pub fn with_images(mut self, images: Vec<Vec<u8>>) -> Self {
        self.images = images;
        self
    }

    pub fn is_valid(&self) -> bool {
        !self.text.is_empty() || !self.images.is_empty()
    }
}

/// Text that never prints its content.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub api_key: Secret,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    pub backoff_base_s: f64,
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>, api_key: Secret) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key,
            timeout_s: 120.0,
            max_retries: 3,
            backoff_base_s: 1.0,
        }
    }

    /// Reads `MODEL_BASE_URL`, `MODEL_NAME` and `MODEL_API_KEY`.
    pub fn from_env() -> Result<Self, VlmError> {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base_url = get("MODEL_BASE_URL").unwrap_or_else(|| "https://api.openai.com/v1".into());
        let model_name = get("MODEL_NAME").unwrap_or_else(|| "gpt-4o-mini".into());
        let api_key = get("MODEL_API_KEY").ok_or_else(|| VlmError::Config("MODEL_API_KEY is not set".into()))?;
        Ok(Self::new(base_url, model_name, Secret::new(api_key)))
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if !(self.timeout_s > 0.0) {
            return Err(VlmError::Config(format!("timeout_s must be positive, got {}", self.timeout_s)));
        }
        if !(self.backoff_base_s >= 0.0) {
            return Err(VlmError::Config("backoff_base_s must be non-negative".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(VlmError::Config(format!("base_url must be http(s): {}", self.base_url)));
        }
        Ok(())
    }
}

/// Anything that turns a conversation into one assistant reply.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, VlmError>;

    /// Short label recorded in run artifacts.
    fn label(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, VlmError> {
        (**self).chat(messages, temperature)
    }

    fn label(&self) -> String {
        (**self).label()
    }
}

/// Content hash of a request: roles, texts, image hashes and temperature.
/// Used as the fixture file stem.
pub fn request_digest(messages: &[ChatMessage], temperature: f64) -> String {
    let mut h = Sha256::new();
    h.update(format!("temperature={temperature:.6}\n").as_bytes());
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0u8]);
        h.update((m.text.len() as u64).to_le_bytes());
        h.update(m.text.as_bytes());
        for img in &m.images {
            h.update(b"img");
            h.update(Sha256::digest(img));
        }
        h.update([1u8]);
    }
    hex::encode(h.finalize())
}
