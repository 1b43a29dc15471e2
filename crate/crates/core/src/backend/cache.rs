use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatMessage};
use crate::refine::GenerationParams;
use crate::text::CanonicalWriter;

const KEY_VERSION: &str = "ncritics-cache-v1";

/// The inputs that determine a cache key, stored alongside the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestDigestInputs {
    pub backend_id: String,
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub nucleus_mass: Option<f64>,
    pub sampling_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request_digest_inputs: RequestDigestInputs,
    pub response: String,
    pub created_unix_ms: u64,
}

/// SHA-256 over length-prefixed fields in fixed order, hex-encoded.
pub fn cache_key(
    backend_id: &str,
    model_name: &str,
    messages: &[ChatMessage],
    params: &GenerationParams,
) -> String {
    let mut w = CanonicalWriter::new();
    w.field(KEY_VERSION)
        .field(backend_id)
        .field(model_name)
        .field(&messages.len().to_string());
    for m in messages {
        w.field(m.role.as_str()).field(&m.content);
    }
    w.field(&format!("{:?}", params.temperature))
        .field(&params.max_output_tokens.to_string())
        .opt_field(params.nucleus_mass.map(|p| format!("{p:?}")).as_deref())
        .opt_field(params.sampling_seed.map(|s| s.to_string()).as_deref());
    w.digest_hex()
}

/// Persistent response cache in front of any backend: one `<key>.json` file
/// per request, written via temp file and atomic rename.
pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for CachedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CachedBackend")
            .field("inner", &self.inner.id())
            .field("dir", &self.dir)
            .finish()
    }
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn read(&self, key: &str) -> Option<String> {
        let path = self.entry_path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "cache read failed");
                return None;
            }
        };
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry.response),
            Ok(_) => {
                tracing::warn!(path = %path.display(), "cache entry key mismatch; ignoring");
                None
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable cache entry; ignoring");
                None
            }
        }
    }

    fn write(&self, entry: &CacheEntry) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer(&mut tmp, entry)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.entry_path(&entry.key))
            .map_err(|e| e.error)?;
        Ok(())
    }
}

#[async_trait]
impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    async fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let key = cache_key(self.inner.id(), self.inner.model_name(), messages, params);
        if let Some(hit) = self.read(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(messages, params).await?;
        let entry = CacheEntry {
            key,
            request_digest_inputs: RequestDigestInputs {
                backend_id: self.inner.id().to_owned(),
                model_name: self.inner.model_name().to_owned(),
                messages: messages.to_vec(),
                temperature: params.temperature,
                max_output_tokens: params.max_output_tokens,
                nucleus_mass: params.nucleus_mass,
                sampling_seed: params.sampling_seed,
            },
            response,
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        if let Err(e) = self.write(&entry) {
            tracing::warn!(dir = %self.dir.display(), error = %e, "cache write failed; passing through");
        }
        Ok(entry.response)
    }
}
