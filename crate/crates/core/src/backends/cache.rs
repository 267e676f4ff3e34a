use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub backend_id: String,
    pub model_name: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry<P> {
    pub key: CacheKey,
    pub payload: P,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// Content-addressed store laid out as `<root>/<backend_id>/<hh>/<hash>`.
///
/// Writes go to a temporary file first and are renamed into place, so racing
/// writers of one key leave a single complete entry.
#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

fn dir_component(backend_id: &str) -> String {
    backend_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let h = &key.content_hash;
        self.root
            .join(dir_component(&key.backend_id))
            .join(&h[..2.min(h.len())])
            .join(h)
    }

    pub fn get<P: for<'de> Deserialize<'de>>(&self, key: &CacheKey) -> Option<CacheEntry<P>> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        let entry: CacheEntry<P> = serde_json::from_slice(&bytes).ok()?;
        (entry.key == *key).then_some(entry)
    }

    pub fn put<P: Serialize>(&self, key: &CacheKey, payload: &P) -> io::Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let entry = CacheEntry {
            key: key.clone(),
            payload,
            created_at,
        };
        let bytes = serde_json::to_vec(&entry).map_err(io::Error::other)?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            key.content_hash,
            std::process::id(),
            TMP_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)
    }
}
