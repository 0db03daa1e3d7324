//! Deterministic backend answering from fixtures.
//!
//! Fixture file format (JSON):
//!
//! ```json
//! {
//!   "digests":  { "<64-hex request digest>": "reply" },
//!   "messages": { "case1": { "A1/round1": "Neutral. ...", "summary": "positive" },
//!                 "*":     { "naive": "neutral" } }
//! }
//! ```
//!
//! Lookup order: request digest, then `messages[id][tag]`, `messages[id][agent]`
//! (the tag without its `/roundN` suffix), `messages[id]["*"]`, and the same
//! three again under the `"*"` message.

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, CacheKey, ChatBackend, CompletionRequest, CompletionResult};

pub const SCRIPTED_BACKEND_ID: &str = "scripted";
const WILDCARD: &str = "*";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixtures {
    #[serde(default)]
    pub digests: BTreeMap<String, String>,
    #[serde(default)]
    pub messages: BTreeMap<String, BTreeMap<String, String>>,
}

impl Fixtures {
    pub fn reply(mut self, message_id: &str, tag: &str, text: impl Into<String>) -> Self {
        self.insert(message_id, tag, text);
        self
    }

    pub fn insert(&mut self, message_id: &str, tag: &str, text: impl Into<String>) {
        self.messages
            .entry(message_id.to_owned())
            .or_default()
            .insert(tag.to_owned(), text.into());
    }

    /// Registers a reply for exactly this request.
    pub fn insert_request(&mut self, request: &CompletionRequest, text: impl Into<String>) {
        self.digests.insert(ScriptedBackend::digest(request), text.into());
    }

    pub fn merge(&mut self, other: Fixtures) {
        self.digests.extend(other.digests);
        for (id, tags) in other.messages {
            self.messages.entry(id).or_default().extend(tags);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    fixtures: Fixtures,
}

impl ScriptedBackend {
    pub fn new(fixtures: Fixtures) -> Self {
        Self { fixtures }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| BackendError::Fixture(format!("reading fixtures {}: {e}", path.display())))?;
        let fixtures = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Fixture(format!("parsing fixtures {}: {e}", path.display())))?;
        Ok(Self::new(fixtures))
    }

    pub fn fixtures(&self) -> &Fixtures {
        &self.fixtures
    }

    /// Digest under which a fixture matches `request` exactly.
    pub fn digest(request: &CompletionRequest) -> String {
        CacheKey::for_request(SCRIPTED_BACKEND_ID, request).to_hex()
    }

    fn lookup(&self, request: &CompletionRequest) -> Option<&str> {
        if let Some(text) = self.fixtures.digests.get(&Self::digest(request)) {
            return Some(text);
        }
        let agent = request.tag.split('/').next().unwrap_or_default();
        for message in [request.message_id.as_str(), WILDCARD] {
            let Some(tags) = self.fixtures.messages.get(message) else {
                continue;
            };
            for tag in [request.tag.as_str(), agent, WILDCARD] {
                if let Some(text) = tags.get(tag) {
                    return Some(text);
                }
            }
        }
        None
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        SCRIPTED_BACKEND_ID
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        match self.lookup(request) {
            Some(text) => Ok(CompletionResult::scripted(text)),
            None => Err(BackendError::MissingFixture {
                message_id: request.message_id.clone(),
                tag: request.tag.clone(),
                digest: Self::digest(request),
            }),
        }
    }
}
