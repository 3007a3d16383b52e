//! On-disk feature cache keyed by content hashes. Entries are written
//! atomically (temp file + rename) so an interrupted run never leaves a
//! partially written entry behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::EmbeddingDataset;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a checkpoint's exact contents (points bit patterns and labels).
pub fn dataset_hash(ds: &EmbeddingDataset) -> String {
    let mut h = Sha256::new();
    h.update(ds.checkpoint_id.as_bytes());
    h.update((ds.len() as u64).to_le_bytes());
    h.update((ds.dim() as u64).to_le_bytes());
    for i in 0..ds.len() {
        for j in 0..ds.dim() {
            h.update(ds.points[(i, j)].to_bits().to_le_bytes());
        }
    }
    for &l in &ds.labels {
        h.update((l as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

/// Directory of JSON entries.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FeatureCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn key(parts: &[&str]) -> String {
        sha256_hex(parts.join("/").as_bytes())
    }

    /// Returns `None` on a miss or on an unreadable entry.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Option<T> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    pub fn put<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string(value)?;
        atomic_write(&self.path(key), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_corrupt_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let key = FeatureCache::key(&["a", "b"]);
        assert_eq!(cache.get::<Vec<f64>>(&key), None);
        cache.put(&key, &vec![1.0, 2.5]).unwrap();
        assert_eq!(cache.get::<Vec<f64>>(&key), Some(vec![1.0, 2.5]));
        fs::write(dir.path().join(format!("{key}.json")), "{trunc").unwrap();
        assert_eq!(cache.get::<Vec<f64>>(&key), None);
    }
}
