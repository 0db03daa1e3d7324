//! Content-addressed response cache.
//!
//! Layout on disk: one `<hex digest>.json` blob per response plus an
//! append-only `index.jsonl` listing digest, tag, and model for browsing.
//! Lookups only ever read blobs, so the index is informational.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, CacheKey, ChatBackend, CompletionRequest, CompletionResult, Usage};

const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt cache blob {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CachedEntry {
    key: String,
    backend: String,
    model: String,
    tag: String,
    text: String,
    usage: Usage,
}

#[derive(Serialize)]
struct IndexLine<'a> {
    key: &'a str,
    backend: &'a str,
    model: &'a str,
    tag: &'a str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<CacheKey, Arc<CachedEntry>>>,
    inflight: Mutex<HashMap<CacheKey, Arc<tokio::sync::Mutex<()>>>>,
    index_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    /// Opens (creating if needed) a cache directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CacheError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| CacheError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self::with_dir(Some(dir)))
    }

    /// A cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        Self::with_dir(None)
    }

    fn with_dir(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            memory: RwLock::default(),
            inflight: Mutex::default(),
            index_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    fn blob_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", key.to_hex())))
    }

    /// Stored text for `key`, if any.
    pub fn get(&self, key: &CacheKey) -> Result<Option<String>, CacheError> {
        Ok(self.lookup(key)?.map(|e| e.text.clone()))
    }

    fn lookup(&self, key: &CacheKey) -> Result<Option<Arc<CachedEntry>>, CacheError> {
        if let Some(entry) = self.memory.read().unwrap().get(key) {
            return Ok(Some(Arc::clone(entry)));
        }
        let Some(path) = self.blob_path(key) else {
            return Ok(None);
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(CacheError::Io { path, source }),
        };
        let entry: CachedEntry =
            serde_json::from_slice(&bytes).map_err(|source| CacheError::Corrupt { path, source })?;
        let entry = Arc::new(entry);
        self.memory.write().unwrap().insert(*key, Arc::clone(&entry));
        Ok(Some(entry))
    }

    fn store(&self, key: CacheKey, entry: CachedEntry) -> Result<(), CacheError> {
        if let Some(path) = self.blob_path(&key) {
            let io_err = |path: &Path| {
                let path = path.to_path_buf();
                move |source| CacheError::Io { path, source }
            };
            let tmp = path.with_extension("json.tmp");
            let body = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
            fs::write(&tmp, body).map_err(io_err(&tmp))?;
            fs::rename(&tmp, &path).map_err(io_err(&path))?;

            let index = self.dir.as_ref().unwrap().join(INDEX_FILE);
            let line = serde_json::to_string(&IndexLine {
                key: &entry.key,
                backend: &entry.backend,
                model: &entry.model,
                tag: &entry.tag,
            })
            .expect("index line serializes");
            let _guard = self.index_lock.lock().unwrap();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&index)
                .map_err(io_err(&index))?;
            writeln!(f, "{line}").map_err(io_err(&index))?;
        }
        self.memory.write().unwrap().insert(key, Arc::new(entry));
        Ok(())
    }

    fn flight_lock(&self, key: &CacheKey) -> Arc<tokio::sync::Mutex<()>> {
        let mut map = self.inflight.lock().unwrap();
        Arc::clone(map.entry(*key).or_default())
    }

    fn release_flight(&self, key: &CacheKey) {
        let mut map = self.inflight.lock().unwrap();
        if let Some(lock) = map.get(key) {
            // only the map itself still holds it
            if Arc::strong_count(lock) == 1 {
                map.remove(key);
            }
        }
    }
}

fn hit(entry: &CachedEntry) -> CompletionResult {
    CompletionResult {
        text: entry.text.clone(),
        usage: entry.usage,
        latency: Duration::ZERO,
        from_cache: true,
        attempts: 0,
    }
}

/// Answers from the cache when possible, otherwise asks `backend` and stores
/// the result. Concurrent callers with the same key share one fetch.
pub async fn cached_complete(
    backend: &dyn ChatBackend,
    cache: &ResponseCache,
    request: &CompletionRequest,
) -> Result<CompletionResult, BackendError> {
    request.validate()?;
    let key = CacheKey::for_request(backend.id(), request);
    if let Some(entry) = cache.lookup(&key)? {
        cache.hits.fetch_add(1, Ordering::SeqCst);
        return Ok(hit(&entry));
    }

    let lock = cache.flight_lock(&key);
    let outcome = {
        let _guard = lock.lock().await;
        match cache.lookup(&key)? {
            Some(entry) => {
                cache.hits.fetch_add(1, Ordering::SeqCst);
                Ok(hit(&entry))
            }
            None => {
                cache.misses.fetch_add(1, Ordering::SeqCst);
                let fetched = backend.complete(request).await;
                if let Ok(result) = &fetched {
                    cache.store(
                        key,
                        CachedEntry {
                            key: key.to_hex(),
                            backend: backend.id().to_owned(),
                            model: request.model.clone(),
                            tag: request.tag.clone(),
                            text: result.text.clone(),
                            usage: result.usage,
                        },
                    )?;
                }
                fetched.map(|mut r| {
                    r.from_cache = false;
                    r
                })
            }
        }
    };
    drop(lock);
    cache.release_flight(&key);
    outcome
}

/// A backend whose calls go through a [`ResponseCache`].
pub struct CachedBackend {
    inner: Arc<dyn ChatBackend>,
    cache: Arc<ResponseCache>,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

#[async_trait]
impl ChatBackend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        cached_complete(self.inner.as_ref(), &self.cache, request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PromptText;
    use crate::backend::CountingBackend;

    struct Echo;

    #[async_trait]
    impl ChatBackend for Echo {
        fn id(&self) -> &str {
            "echo"
        }

        async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
            tokio::task::yield_now().await;
            Ok(CompletionResult::scripted(format!("echo: {}", request.prompt.user)))
        }
    }

    fn req(user: &str) -> CompletionRequest {
        CompletionRequest::new("m", PromptText::user(user)).tagged("id", "naive")
    }

    #[tokio::test]
    async fn miss_then_hit() {
        let backend = CountingBackend::new(Echo);
        let cache = ResponseCache::in_memory();
        let first = cached_complete(&backend, &cache, &req("a")).await.unwrap();
        let second = cached_complete(&backend, &cache, &req("a")).await.unwrap();
        assert!(!first.from_cache);
        assert!(second.from_cache);
        assert_eq!(first.text, second.text);
        assert_eq!(backend.calls(), 1);
        assert_eq!(cache.stats(), CacheStats { hits: 1, misses: 1 });

        let mut warmer = req("a");
        warmer.temperature = 0.7;
        let third = cached_complete(&backend, &cache, &warmer).await.unwrap();
        assert!(!third.from_cache);
        assert_eq!(backend.calls(), 2);
    }

    #[tokio::test]
    async fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let backend = CountingBackend::new(Echo);
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cached_complete(&backend, &cache, &req("persist me")).await.unwrap();
        }
        let cache = ResponseCache::open(dir.path()).unwrap();
        let r = cached_complete(&backend, &cache, &req("persist me")).await.unwrap();
        assert!(r.from_cache);
        assert_eq!(r.text, "echo: persist me");
        assert_eq!(backend.calls(), 1);
        let index = fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        assert_eq!(index.lines().count(), 1);
        assert!(index.contains("\"tag\":\"naive\""));
    }

    #[tokio::test]
    async fn corrupt_blob_is_a_cache_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = CacheKey::for_request("echo", &req("x"));
        fs::write(dir.path().join(format!("{key}.json")), b"{not json").unwrap();
        let err = cached_complete(&Echo, &cache, &req("x")).await.unwrap_err();
        assert!(matches!(err, BackendError::Cache(CacheError::Corrupt { .. })));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn concurrent_requests_fetch_once() {
        let backend = Arc::new(CountingBackend::new(Echo));
        let cache = Arc::new(ResponseCache::in_memory());
        let mut handles = Vec::new();
        for _ in 0..32 {
            let backend = Arc::clone(&backend);
            let cache = Arc::clone(&cache);
            handles.push(tokio::spawn(async move {
                cached_complete(backend.as_ref(), &cache, &req("same")).await.unwrap().text
            }));
        }
        for h in handles {
            assert_eq!(h.await.unwrap(), "echo: same");
        }
        assert_eq!(backend.calls(), 1);
        assert!(cache.inflight.lock().unwrap().is_empty());
    }

    #[tokio::test]
    async fn errors_are_not_cached() {
        struct Failing;
        #[async_trait]
        impl ChatBackend for Failing {
            fn id(&self) -> &str {
                "echo"
            }
            async fn complete(&self, _: &CompletionRequest) -> Result<CompletionResult, BackendError> {
                Err(BackendError::Protocol("boom".into()))
            }
        }
        let cache = ResponseCache::in_memory();
        assert!(cached_complete(&Failing, &cache, &req("q")).await.is_err());
        // same id, so a later success fills the same slot
        let ok = cached_complete(&Echo, &cache, &req("q")).await.unwrap();
        assert!(!ok.from_cache);
    }
}
