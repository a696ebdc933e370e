//! Content-addressed response cache.
//!
//! One entry per file named by the hex cache key; entries are a small JSON
//! envelope so truncated or corrupted files fail to parse and are treated as
//! misses (re-fetched and rewritten). Writes go to a temp file in the cache
//! directory and are renamed into place, so concurrent writers of the same
//! key race benignly: last writer wins with identical content.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatBackend, ChatRequest, GatewayError, LlmResponse};

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    content: String,
}

pub struct CachedBackend {
    inner: Arc<dyn ChatBackend>,
    dir: PathBuf,
    nonce: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, cache_dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = cache_dir.into();
        fs::create_dir_all(&dir).map_err(|source| GatewayError::Cache {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(CachedBackend {
            inner,
            dir,
            nonce: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &Arc<dyn ChatBackend> {
        &self.inner
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    fn read_entry(&self, path: &Path) -> Result<Option<String>, GatewayError> {
        match fs::read_to_string(path) {
            Ok(raw) => match serde_json::from_str::<CacheEntry>(&raw) {
                Ok(entry) => Ok(Some(entry.content)),
                // Corrupted entry: treat as a miss and let the caller rewrite it.
                Err(_) => Ok(None),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(GatewayError::Cache {
                path: path.display().to_string(),
                source,
            }),
        }
    }

    fn write_entry(&self, path: &Path, content: &str) -> Result<(), GatewayError> {
        let entry = CacheEntry {
            content: content.to_string(),
        };
        let serialized = serde_json::to_string(&entry).expect("cache entry serializes");
        let tmp = self.dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.nonce.fetch_add(1, Ordering::SeqCst)
        ));
        let io_err = |source: std::io::Error| GatewayError::Cache {
            path: path.display().to_string(),
            source,
        };
        fs::write(&tmp, serialized).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)?;
        Ok(())
    }

    /// Look up the request in the cache; on a miss, delegate to the inner
    /// backend and persist the response atomically.
    pub fn cached_complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError> {
        request.validate()?;
        let key = cache_key(&self.inner.id(), request);
        let path = self.entry_path(&key);
        if let Some(content) = self.read_entry(&path)? {
            return Ok(LlmResponse {
                content,
                backend_id: self.inner.id(),
                cached: true,
            });
        }
        let response = self.inner.complete(request)?;
        self.write_entry(&path, &response.content)?;
        Ok(response)
    }
}

/// The cached layer is itself a backend, so pipelines can be handed either a
/// raw or a cached gateway transparently.
impl ChatBackend for CachedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<LlmResponse, GatewayError> {
        self.cached_complete(request)
    }

    fn id(&self) -> String {
        self.inner.id()
    }

    fn calls(&self) -> u64 {
        self.inner.calls()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, DEFAULT_MODEL};

    fn cached(dir: &Path) -> CachedBackend {
        CachedBackend::new(Arc::new(MockBackend::new(11)), dir).unwrap()
    }

    fn request(text: &str, temperature: f64) -> ChatRequest {
        ChatRequest::user(
            DEFAULT_MODEL,
            format!("{text}\n\nSummarize the modality segments above into one concise paragraph."),
            temperature,
            5,
        )
    }

    #[test]
    fn miss_then_hit_with_identical_content() {
        let dir = tempfile::tempdir().unwrap();
        let backend = cached(dir.path());
        let req = request("First sentence. Second sentence.", 0.0);
        let first = backend.cached_complete(&req).unwrap();
        let second = backend.cached_complete(&req).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.content, second.content);
        assert_eq!(backend.calls(), 1, "hit must not touch the backend");
    }

    #[test]
    fn temperature_keys_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let backend = cached(dir.path());
        backend.cached_complete(&request("Some text here.", 0.2)).unwrap();
        let other = backend.cached_complete(&request("Some text here.", 0.9)).unwrap();
        assert!(!other.cached);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn truncated_entry_is_refetched_and_rewritten() {
        let dir = tempfile::tempdir().unwrap();
        let backend = cached(dir.path());
        let req = request("Recoverable text body.", 0.0);
        let original = backend.cached_complete(&req).unwrap();
        let key = cache_key(&backend.id(), &req);
        let path = dir.path().join(&key);
        let full = fs::read_to_string(&path).unwrap();
        fs::write(&path, &full[..full.len() / 2]).unwrap();
        let refetched = backend.cached_complete(&req).unwrap();
        assert!(!refetched.cached, "corrupted entry must be a miss");
        assert_eq!(refetched.content, original.content);
        assert_eq!(backend.calls(), 2);
        let rewritten = backend.cached_complete(&req).unwrap();
        assert!(rewritten.cached);
    }
}
