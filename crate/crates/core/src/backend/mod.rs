//! Chat-completion backends.
//!
//! Every model call goes through [`ChatBackend::complete`]. Two backends ship:
//! [`HttpBackend`] for any server speaking the chat-completions wire format,
//! and [`ScriptedBackend`], which answers from fixtures. [`CachedBackend`]
//! layers the content-addressed [`ResponseCache`] over either one.

mod cache;
mod http;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::PromptText;

pub use cache::{cached_complete, CacheError, CacheStats, CachedBackend, ResponseCache};
pub use http::{HttpBackend, HttpBackendConfig, RetryPolicy};
pub use scripted::{Fixtures, ScriptedBackend, SCRIPTED_BACKEND_ID};

pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no fixture for message `{message_id}` tag `{tag}` (digest {digest})")]
    MissingFixture {
        message_id: String,
        tag: String,
        digest: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("fixtures: {0}")]
    Fixture(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: PromptText,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Free-form label for logs and fixtures, e.g. `A2/round1` or `summary`.
    pub tag: String,
    /// Message the request belongs to. Not part of the cache key.
    pub message_id: String,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: PromptText) -> Self {
        Self {
            model: model.into(),
            prompt,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: String::new(),
            message_id: String::new(),
        }
    }

    pub fn tagged(mut self, message_id: impl Into<String>, tag: impl Into<String>) -> Self {
        self.message_id = message_id.into();
        self.tag = tag.into();
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    /// Raw model output, unparsed.
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
    pub from_cache: bool,
    /// Transport attempts spent, 0 for cache hits.
    pub attempts: u32,
}

impl CompletionResult {
    pub fn scripted(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: Usage::default(),
            latency: Duration::ZERO,
            from_cache: false,
            attempts: 1,
        }
    }
}

/// SHA-256 over the canonical JSON form of everything that can change a
/// completion: backend, model, sampling parameters, and both prompt parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    backend: &'a str,
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    system: Option<&'a str>,
    user: &'a str,
}

impl CacheKey {
    pub fn for_request(backend_id: &str, request: &CompletionRequest) -> Self {
        let canonical = CanonicalRequest {
            backend: backend_id,
            model: &request.model,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            system: request.prompt.system.as_deref(),
            user: &request.prompt.user,
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
        Self(Sha256::digest(&bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> &str;

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

#[async_trait]
impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request).await
    }
}

/// Counts the calls that reach the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ChatBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request).await
    }
}
