//! Content-addressed reply cache at `<root>/<backend_id>/<sha256>`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, VisionQuery, VisionReply};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    #[default]
    Use,
    /// Always query, then overwrite the entry.
    Refresh,
    Off,
}

/// Digest of `(backend_id, prompt, temperature, image bytes)`.
pub fn cache_key(backend_id: &str, q: &VisionQuery) -> String {
    let mut h = Sha256::new();
    h.update(b"plate-bench/reply/v1\0");
    for part in [backend_id.as_bytes(), q.prompt.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(q.temperature.to_bits().to_le_bytes());
    h.update((q.image.len() as u64).to_le_bytes());
    h.update(&q.image[..]);
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    text: String,
    latency_ms: u64,
    backend_id: String,
}

#[derive(Debug)]
pub struct ResponseCache {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, backend_id: &str, key: &str) -> PathBuf {
        self.root.join(backend_id).join(key)
    }

    /// A missing or unreadable entry is a miss; unreadable ones are logged.
    pub fn get(&self, backend_id: &str, key: &str) -> Option<VisionReply> {
        let path = self.entry_path(backend_id, key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable: {e}", path.display());
                return None;
            }
        };
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(e) if e.backend_id == backend_id => Some(VisionReply {
                text: e.text,
                latency_ms: e.latency_ms,
                backend_id: e.backend_id,
                cached: true,
            }),
            Ok(_) => {
                log::warn!("cache entry {} belongs to another backend; ignoring", path.display());
                None
            }
            Err(e) => {
                log::warn!("cache entry {} is corrupt ({e}); treating as a miss", path.display());
                None
            }
        }
    }

    /// Writes via a temporary file and rename so readers never see partial entries.
    pub fn put(&self, key: &str, reply: &VisionReply) -> std::io::Result<()> {
        let dir = self.root.join(&reply.backend_id);
        std::fs::create_dir_all(&dir)?;
        let entry = Entry {
            text: reply.text.clone(),
            latency_ms: reply.latency_ms,
            backend_id: reply.backend_id.clone(),
        };
        let tmp = dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(&entry).map_err(std::io::Error::other)?)?;
        f.sync_all()?;
        drop(f);
        std::fs::rename(&tmp, dir.join(key))
    }
}

pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    cache: Arc<ResponseCache>,
    policy: CachePolicy,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, cache: Arc<ResponseCache>, policy: CachePolicy) -> Self {
        Self { inner, cache, policy }
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn query(&self, q: &VisionQuery) -> Result<VisionReply, BackendError> {
        if self.policy == CachePolicy::Off {
            return self.inner.query(q);
        }
        let key = cache_key(self.id(), q);
        if self.policy == CachePolicy::Use {
            if let Some(hit) = self.cache.get(self.id(), &key) {
                return Ok(hit);
            }
        }
        let reply = self.inner.query(q)?;
        if let Err(e) = self.cache.put(&key, &reply) {
            log::warn!("could not cache reply for {}: {e}", self.id());
        }
        Ok(reply)
    }

    fn check(&self) -> Result<VisionReply, BackendError> {
        self.inner.check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use plate_core::mock::ErrorModel;
    use plate_core::normalize_label;

    fn q(image: &[u8], prompt: &str) -> VisionQuery {
        VisionQuery::new(image.to_vec(), "image/png", prompt)
    }

    #[test]
    fn keys_follow_content() {
        let a = cache_key("m", &q(b"img", "p1"));
        assert_eq!(a, cache_key("m", &q(b"img", "p1")));
        assert_ne!(a, cache_key("m", &q(b"img", "p2")));
        assert_ne!(a, cache_key("n", &q(b"img", "p1")));
        assert_ne!(a, cache_key("m", &q(b"imh", "p1")));
        let mut hot = q(b"img", "p1");
        hot.temperature = 0.7;
        assert_ne!(a, cache_key("m", &hot));
        // field boundaries are unambiguous
        assert_ne!(cache_key("ab", &q(b"x", "c")), cache_key("a", &q(b"x", "bc")));
    }

    fn mock_with(image: &[u8]) -> Arc<MockBackend> {
        let mut m = MockBackend::new("mock", ErrorModel::default()).unwrap();
        m.register_image(image, Some(normalize_label("ABC1234")), Default::default());
        Arc::new(m)
    }

    #[test]
    fn second_query_is_cached_and_identical_images_share_entries() {
        let dir = tempfile::tempdir().unwrap();
        let mock = mock_with(b"plate-bytes");
        let cached = CachedBackend::new(mock.clone(), Arc::new(ResponseCache::new(dir.path())), CachePolicy::Use);
        let first = cached.query(&q(b"plate-bytes", "read it")).unwrap();
        // same bytes, as if loaded from a second file name
        let copy = b"plate-bytes".to_vec();
        let second = cached.query(&q(&copy, "read it")).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(first.latency_ms, second.latency_ms);
        assert_eq!(mock.calls(), 1);
        cached.query(&q(b"plate-bytes", "another prompt")).unwrap();
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let mock = mock_with(b"img");
        let cache = Arc::new(ResponseCache::new(dir.path()));
        let cached = CachedBackend::new(mock.clone(), cache.clone(), CachePolicy::Use);
        let query = q(b"img", "read");
        cached.query(&query).unwrap();
        std::fs::write(cache.entry_path("mock", &cache_key("mock", &query)), b"{not json").unwrap();
        let again = cached.query(&query).unwrap();
        assert!(!again.cached);
        assert_eq!(mock.calls(), 2);
        // and the entry was repaired
        assert!(cached.query(&query).unwrap().cached);
    }

    #[test]
    fn refresh_and_off_bypass_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let mock = mock_with(b"img");
        let cache = Arc::new(ResponseCache::new(dir.path()));
        let query = q(b"img", "read");
        CachedBackend::new(mock.clone(), cache.clone(), CachePolicy::Use).query(&query).unwrap();
        let r = CachedBackend::new(mock.clone(), cache.clone(), CachePolicy::Refresh).query(&query).unwrap();
        assert!(!r.cached);
        let r = CachedBackend::new(mock.clone(), cache.clone(), CachePolicy::Off).query(&query).unwrap();
        assert!(!r.cached);
        assert_eq!(mock.calls(), 3);
    }
}
