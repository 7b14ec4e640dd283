//! Content-addressed response cache.
//!
//! Each entry lives at `<dir>/<key[..2]>/<key>.json` and holds the request,
//! the response, a SHA-256 checksum of the serialized response and a
//! timestamp. The replay backend reads the same layout.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::BackendError;
use crate::io::write_atomic;
use crate::seed::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Logprobs,
    Generate,
}

/// Digest of (backend identity, request kind, prompt bytes, decoding parameters).
pub fn request_key(identity: &str, kind: RequestKind, prompt: &str, params: &Value) -> String {
    let canonical = json!({
        "identity": identity,
        "kind": kind,
        "prompt": prompt,
        "params": params,
    });
    sha256_hex(canonical.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub identity: String,
    pub kind: RequestKind,
    pub prompt: String,
    pub params: Value,
    pub response: Value,
    pub checksum: String,
    pub created_at: String,
}

impl CacheRecord {
    pub fn new(
        key: String,
        identity: String,
        kind: RequestKind,
        prompt: &str,
        params: Value,
        response: Value,
    ) -> Self {
        let checksum = sha256_hex(response.to_string());
        CacheRecord {
            key,
            identity,
            kind,
            prompt: prompt.to_string(),
            params,
            response,
            checksum,
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    fn is_intact(&self) -> bool {
        self.checksum == sha256_hex(self.response.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub corrupt_evictions: u64,
}

pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    corrupt: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            corrupt: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    /// Reads without touching the hit/miss counters. Corrupt entries are
    /// evicted and reported as absent.
    pub fn peek(&self, key: &str) -> Result<Option<CacheRecord>, BackendError> {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        };
        match serde_json::from_slice::<CacheRecord>(&bytes) {
            Ok(r) if r.is_intact() && r.key == key => Ok(Some(r)),
            _ => {
                log::warn!("evicting corrupt cache entry {}", path.display());
                self.corrupt.fetch_add(1, Ordering::SeqCst);
                let _guard = self.write_lock.lock().unwrap();
                let _ = fs::remove_file(&path);
                Ok(None)
            }
        }
    }

    pub fn get(&self, key: &str) -> Result<Option<Value>, BackendError> {
        match self.peek(key)? {
            Some(r) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                Ok(Some(r.response))
            }
            None => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                Ok(None)
            }
        }
    }

    pub fn put(&self, record: &CacheRecord) -> Result<(), BackendError> {
        let path = self.entry_path(&record.key);
        let bytes = serde_json::to_vec(record).expect("cache records serialize");
        let _guard = self.write_lock.lock().unwrap();
        write_atomic(&path, &bytes).map_err(|e| BackendError::Cache(e.to_string()))
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            corrupt_evictions: self.corrupt.load(Ordering::SeqCst),
        }
    }

    /// Number of entries and total bytes on disk.
    pub fn disk_usage(&self) -> Result<(usize, u64), BackendError> {
        let mut n = 0;
        let mut bytes = 0;
        for shard in read_dir(&self.dir)? {
            if !shard.is_dir() {
                continue;
            }
            for entry in read_dir(&shard)? {
                if entry.extension().is_some_and(|e| e == "json") {
                    n += 1;
                    bytes += fs::metadata(&entry).map(|m| m.len()).unwrap_or(0);
                }
            }
        }
        Ok((n, bytes))
    }

    /// Removes every entry; returns how many were deleted.
    pub fn clear(&self) -> Result<usize, BackendError> {
        let (n, _) = self.disk_usage()?;
        let _guard = self.write_lock.lock().unwrap();
        for shard in read_dir(&self.dir)? {
            if shard.is_dir() {
                fs::remove_dir_all(&shard)
                    .map_err(|e| BackendError::Cache(format!("{}: {e}", shard.display())))?;
            }
        }
        Ok(n)
    }
}

fn read_dir(dir: &Path) -> Result<Vec<PathBuf>, BackendError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}
