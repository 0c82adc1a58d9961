use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{EmbedError, Embedder, EmbeddingVector};
use crate::binfmt;

/// Content-addressed embedding store: one file per (provider fingerprint,
/// text) key, holding a `u32` dimension and little-endian `f64` values.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EmbedError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| EmbedError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(fingerprint: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(fingerprint.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    /// Returns the cached vector, discarding entries that fail to decode.
    pub fn get(&self, key: &str) -> Option<EmbeddingVector> {
        let path = self.entry_path(key);
        let bytes = std::fs::read(&path).ok()?;
        match binfmt::read_vector(&bytes)
            .map_err(|e| e.to_string())
            .and_then(|values| EmbeddingVector::new(values).map_err(|e| e.to_string()))
        {
            Ok(v) if v.dim() > 0 => Some(v),
            Ok(_) | Err(_) => {
                log::warn!("discarding corrupt embedding cache entry {}", path.display());
                let _ = std::fs::remove_file(&path);
                None
            }
        }
    }

    /// Writes through a temp file and renames, so readers see whole entries only.
    pub fn put(&self, key: &str, vector: &EmbeddingVector) -> Result<(), EmbedError> {
        let err = |e: std::io::Error| EmbedError::Cache(e.to_string());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        let mut buf = Vec::with_capacity(4 + vector.dim() * 8);
        binfmt::write_vector(&mut buf, vector.values()).map_err(err)?;
        tmp.write_all(&buf).map_err(err)?;
        tmp.persist(self.entry_path(key)).map_err(|e| err(e.error))?;
        Ok(())
    }
}

/// Embeds `texts`, serving hits from `cache` and sending only the distinct
/// misses to the provider (in one call).
pub fn cache_get_or_embed<E: Embedder + ?Sized>(
    cache: &EmbeddingCache,
    embedder: &E,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let fingerprint = embedder.fingerprint();
    let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(&fingerprint, t)).collect();
    let mut found: HashMap<&str, EmbeddingVector> = HashMap::new();
    let mut missing: Vec<String> = Vec::new();
    let mut missing_keys: Vec<&str> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (key, text) in keys.iter().zip(texts) {
        if !seen.insert(key.as_str()) {
            continue;
        }
        match cache.get(key) {
            Some(v) => {
                found.insert(key, v);
            }
            None => {
                missing.push(text.clone());
                missing_keys.push(key);
            }
        }
    }
    if !missing.is_empty() {
        let fresh = embedder.embed_batch(&missing)?;
        for (key, v) in missing_keys.into_iter().zip(fresh) {
            cache.put(key, &v)?;
            found.insert(key, v);
        }
    }
    let out: Vec<EmbeddingVector> = keys.iter().map(|k| found[k.as_str()].clone()).collect();
    let dim = out[0].dim();
    if let Some(bad) = out.iter().find(|v| v.dim() != dim) {
        return Err(EmbedError::DimensionMismatch { batch: 0, expected: dim, found: bad.dim() });
    }
    Ok(out)
}
