//! Completion backends: a chat-completions HTTP client, deterministic
//! scripted doubles and a persistent response cache that wraps either.

mod cache;
mod http;
mod retry;
mod scripted;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refine::GenerationParams;

pub use cache::{cache_key, CacheEntry, CachedBackend};
pub use http::{BackendProfile, HttpBackend};
pub use retry::{retry_with_policy, RetryPolicy};
pub use scripted::{FnBackend, Matcher, ScriptRule, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendErrorKind {
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{0}")]
    Failed(String),
}

impl BackendErrorKind {
    /// Timeouts, transport errors, 429 and 5xx are retried; everything else is permanent.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendErrorKind::Timeout | BackendErrorKind::Transport(_) => true,
            BackendErrorKind::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("backend `{backend_id}` failed after {attempts} attempt(s): {kind}")]
pub struct BackendError {
    pub backend_id: String,
    pub attempts: u32,
    pub kind: BackendErrorKind,
}

impl BackendError {
    pub fn new(backend_id: impl Into<String>, attempts: u32, kind: BackendErrorKind) -> Self {
        Self {
            backend_id: backend_id.into(),
            attempts,
            kind,
        }
    }
}

/// Uniform completion interface.
#[async_trait]
pub trait Backend: Send + Sync {
    /// Unique id within a configuration; part of every cache key.
    fn id(&self) -> &str;

    fn model_name(&self) -> &str;

    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError>;
}

pub(crate) fn check_messages(backend_id: &str, messages: &[ChatMessage]) -> Result<(), BackendError> {
    match messages.last() {
        None => Err(BackendError::new(
            backend_id,
            0,
            BackendErrorKind::InvalidRequest("empty message list".into()),
        )),
        Some(m) if m.role != Role::User => Err(BackendError::new(
            backend_id,
            0,
            BackendErrorKind::InvalidRequest("last message must have role user".into()),
        )),
        Some(_) => Ok(()),
    }
}
