//! On-disk network directories.
//!
//! Layout: `manifest` (JSON), `lambda.bin`, `phi.bin`, `embeddings.bin`,
//! optional `similarity.bin`, and `indicators.csv`. Matrices use the
//! [`binfmt`](crate::binfmt) encoding. The manifest records a SHA-256 for every
//! data file; any missing or mismatching file makes the directory corrupt.
//! Readers accept every `1.x` manifest; fields added after 1.0 have defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binfmt;
use crate::corpus::{read_corpus, Corpus, CorpusFormat};
use crate::embed::{EmbeddingVector, ProviderConfig};
use crate::factor::{DimensionMeta, Extraction, FactorError, ModelFlags, NetworkModel};
use crate::simmat::SimilarityMatrix;

pub const FORMAT_VERSION: &str = "1.1";
pub const MANIFEST_FILE: &str = "manifest";
pub const LAMBDA_FILE: &str = "lambda.bin";
pub const PHI_FILE: &str = "phi.bin";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const SIMILARITY_FILE: &str = "similarity.bin";
pub const INDICATORS_FILE: &str = "indicators.csv";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("corrupt network: {0}")]
    CorruptNetwork(String),
    #[error("unsupported network format version {0}")]
    UnsupportedVersion(String),
    #[error("output directory {} already exists", .0.display())]
    AlreadyExists(PathBuf),
    #[error("inconsistent network: {0}")]
    Inconsistent(String),
    #[error("network I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] FactorError),
}

fn corrupt(msg: impl Into<String>) -> NetworkError {
    NetworkError::CorruptNetwork(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    p: usize,
    k: usize,
    threshold: f64,
    extraction: Extraction,
    dimensions: Vec<DimensionMeta>,
    checksums: BTreeMap<String, String>,
    #[serde(default)]
    eigenvalues: Option<Vec<f64>>,
    #[serde(default)]
    flags: ModelFlags,
    #[serde(default)]
    provider: Option<ProviderConfig>,
    #[serde(default)]
    embedding_dim: Option<usize>,
}

/// A fitted model together with its corpus and corpus embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub model: NetworkModel,
    pub corpus: Corpus,
    /// Unit-norm corpus embeddings aligned with `model.indicator_ids`;
    /// needed for projection.
    pub embeddings: Option<Vec<EmbeddingVector>>,
    pub similarity: Option<SimilarityMatrix>,
    /// Provider that produced `embeddings`.
    pub provider: Option<ProviderConfig>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Network {
    pub fn new(
        model: NetworkModel,
        corpus: Corpus,
        embeddings: Option<Vec<EmbeddingVector>>,
        similarity: Option<SimilarityMatrix>,
        provider: Option<ProviderConfig>,
    ) -> Result<Self, NetworkError> {
        let net = Self { model, corpus, embeddings, similarity, provider };
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<(), NetworkError> {
        self.model.validate()?;
        let p = self.model.p();
        let bad = |m: String| Err(NetworkError::Inconsistent(m));
        if self.corpus.len() != p || self.corpus.indicators().iter().zip(&self.model.indicator_ids).any(|(i, id)| &i.id != id) {
            return bad("corpus order does not match model indicator ids".into());
        }
        if let Some(e) = &self.embeddings {
            if e.len() != p {
                return bad(format!("{} embeddings for {p} indicators", e.len()));
            }
            let d = e.first().map_or(0, EmbeddingVector::dim);
            if d == 0 || e.iter().any(|v| v.dim() != d) {
                return bad("embeddings have inconsistent dimension".into());
            }
        }
        if let Some(s) = &self.similarity {
            if s.indicator_ids() != self.model.indicator_ids.as_slice() {
                return bad("similarity matrix ids do not match model".into());
            }
        }
        Ok(())
    }

    /// Raw indicator texts in model order.
    pub fn texts(&self) -> Vec<String> {
        self.corpus.indicators().iter().map(|i| i.raw_text.clone()).collect()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embeddings.as_ref().and_then(|e| e.first()).map(EmbeddingVector::dim)
    }

    /// Writes into `dir`, creating it if needed. The manifest is written last.
    pub fn save(&self, dir: &Path) -> Result<(), NetworkError> {
        self.check()?;
        fs::create_dir_all(dir)?;
        let mut files: Vec<(&str, Vec<u8>)> =
            vec![(LAMBDA_FILE, binfmt::matrix_to_bytes(&self.model.lambda)), (PHI_FILE, binfmt::matrix_to_bytes(&self.model.phi))];
        if let Some(e) = &self.embeddings {
            let d = self.embedding_dim().unwrap_or(0);
            let m = DMatrix::from_fn(e.len(), d, |i, j| e[i].values()[j]);
            files.push((EMBEDDINGS_FILE, binfmt::matrix_to_bytes(&m)));
        }
        if let Some(s) = &self.similarity {
            files.push((SIMILARITY_FILE, binfmt::matrix_to_bytes(s.values())));
        }
        let mut csv = Vec::new();
        self.corpus.write_csv(&mut csv).map_err(|e| NetworkError::Inconsistent(e.to_string()))?;
        files.push((INDICATORS_FILE, csv));

        let mut checksums = BTreeMap::new();
        for (name, bytes) in &files {
            fs::write(dir.join(name), bytes)?;
            checksums.insert(name.to_string(), sha256_hex(bytes));
        }
        let manifest = Manifest {
            version: FORMAT_VERSION.to_string(),
            p: self.model.p(),
            k: self.model.k(),
            threshold: self.model.threshold,
            extraction: self.model.extraction,
            dimensions: self.model.dimensions.clone(),
            checksums,
            eigenvalues: Some(self.model.eigenvalues.clone()),
            flags: self.model.flags,
            provider: self.provider.clone(),
            embedding_dim: self.embedding_dim(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Saves into a temporary sibling of `out` and renames it into place, so
    /// `out` is either absent or complete. Fails if `out` already exists.
    pub fn save_atomic(&self, out: &Path) -> Result<(), NetworkError> {
        if out.exists() {
            return Err(NetworkError::AlreadyExists(out.to_path_buf()));
        }
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let tmp = tempfile::Builder::new().prefix(".aligns-network-").tempdir_in(&parent)?;
        self.save(tmp.path())?;
        fs::rename(tmp.path(), out)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NetworkError> {
        let manifest_bytes = fs::read(dir.join(MANIFEST_FILE)).map_err(|e| corrupt(format!("{MANIFEST_FILE}: {e}")))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| corrupt(format!("{MANIFEST_FILE}: {e}")))?;
        if manifest.version.split('.').next() != Some("1") {
            return Err(NetworkError::UnsupportedVersion(manifest.version));
        }
        for required in [LAMBDA_FILE, PHI_FILE, INDICATORS_FILE] {
            if !manifest.checksums.contains_key(required) {
                return Err(corrupt(format!("manifest lists no checksum for {required}")));
            }
        }
        let mut contents: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
        for (name, expected) in &manifest.checksums {
            let bytes = fs::read(dir.join(name)).map_err(|e| corrupt(format!("{name}: {e}")))?;
            if &sha256_hex(&bytes) != expected {
                return Err(corrupt(format!("checksum mismatch for {name}")));
            }
            contents.insert(name.as_str(), bytes);
        }
        let matrix = |name: &str| -> Result<Option<DMatrix<f64>>, NetworkError> {
            contents.get(name).map(|b| binfmt::read_matrix(b.as_slice()).map_err(|e| corrupt(format!("{name}: {e}")))).transpose()
        };
        let (p, k) = (manifest.p, manifest.k);
        let lambda = matrix(LAMBDA_FILE)?.expect("required file");
        let phi = matrix(PHI_FILE)?.expect("required file");
        if lambda.shape() != (p, k) || phi.shape() != (k, k) {
            return Err(corrupt("matrix shapes do not match manifest"));
        }
        let corpus =
            read_corpus(contents[INDICATORS_FILE].as_slice(), CorpusFormat::Csv).map_err(|e| corrupt(format!("{INDICATORS_FILE}: {e}")))?;
        if corpus.len() != p {
            return Err(corrupt("indicator count does not match manifest"));
        }
        let ids = corpus.ids();
        let embeddings = match matrix(EMBEDDINGS_FILE)? {
            Some(m) => {
                if m.nrows() != p || manifest.embedding_dim.is_some_and(|d| d != m.ncols()) {
                    return Err(corrupt("embedding matrix shape does not match manifest"));
                }
                let rows = m
                    .row_iter()
                    .map(|r| EmbeddingVector::new(r.iter().copied().collect()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| corrupt(format!("{EMBEDDINGS_FILE}: {e}")))?;
                Some(rows)
            }
            None => None,
        };
        let similarity = match matrix(SIMILARITY_FILE)? {
            Some(m) => Some(SimilarityMatrix::from_parts(m, ids.clone()).map_err(|e| corrupt(format!("{SIMILARITY_FILE}: {e}")))?),
            None => None,
        };
        // 1.0 manifests carry no eigenvalues; canonical columns are ordered by
        // sum of squared loadings, which then stands in for them.
        let eigenvalues = manifest.eigenvalues.unwrap_or_else(|| lambda.column_iter().map(|c| c.norm_squared()).collect());
        let model = NetworkModel {
            lambda,
            phi,
            eigenvalues,
            threshold: manifest.threshold,
            indicator_ids: ids,
            dimensions: manifest.dimensions,
            extraction: manifest.extraction,
            flags: manifest.flags,
        };
        let net = Self { model, corpus, embeddings, similarity, provider: manifest.provider };
        net.check().map_err(|e| corrupt(e.to_string()))?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Indicator;
    use crate::factor::{fit_network, FitOptions};

    fn sample() -> Network {
        let texts = ["i sleep badly", "i wake up tired", "i worry a lot", "i feel nervous", "i enjoy parties", "i like crowds"];
        let corpus = Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Indicator::new(format!("q{i}"), *t, Some(format!("c{}", i / 2)), None).unwrap())
                .collect(),
        )
        .unwrap();
        let mut s = DMatrix::identity(6, 6);
        for a in 0..6 {
            for b in 0..6 {
                if a != b && a / 2 == b / 2 {
                    s[(a, b)] = 0.8;
                } else if a != b {
                    s[(a, b)] = 0.1 / (1.0 + (a + b) as f64);
                }
            }
        }
        let sim = SimilarityMatrix::from_parts(s, corpus.ids()).unwrap();
        let model = fit_network(&sim, FitOptions::default()).unwrap();
        let embeddings = (0..6).map(|i| EmbeddingVector::normalized(vec![1.0 + i as f64 / 3.0, 0.5, -0.25 * i as f64]).unwrap()).collect();
        Network::new(model, corpus, Some(embeddings), Some(sim), Some(ProviderConfig::deterministic_test())).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample();
        net.save(dir.path()).unwrap();
        assert_eq!(Network::load(dir.path()).unwrap(), net);
    }

    #[test]
    fn missing_or_altered_files_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        fs::remove_file(dir.path().join(PHI_FILE)).unwrap();
        assert!(matches!(Network::load(dir.path()), Err(NetworkError::CorruptNetwork(_))));

        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let path = dir.path().join(LAMBDA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Network::load(dir.path()), Err(NetworkError::CorruptNetwork(_))));
    }

    #[test]
    fn older_minor_version_loads() {
        let dir = tempfile::tempdir().unwrap();
        let net = sample();
        net.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        let obj = v.as_object_mut().unwrap();
        for key in ["eigenvalues", "flags", "provider", "embedding_dim"] {
            obj.remove(key);
        }
        obj.insert("version".into(), "1.0".into());
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        let loaded = Network::load(dir.path()).unwrap();
        assert_eq!(loaded.model.lambda, net.model.lambda);
        assert_eq!(loaded.provider, None);

        obj_version(&path, "2.0");
        assert!(matches!(Network::load(dir.path()), Err(NetworkError::UnsupportedVersion(_))));
    }

    fn obj_version(path: &Path, version: &str) {
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
        v["version"] = version.into();
        fs::write(path, serde_json::to_vec(&v).unwrap()).unwrap();
    }

    #[test]
    fn atomic_save_refuses_existing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("net");
        sample().save_atomic(&out).unwrap();
        assert!(out.join(MANIFEST_FILE).exists());
        assert!(matches!(sample().save_atomic(&out), Err(NetworkError::AlreadyExists(_))));
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().filter_map(Result::ok).filter(|e| e.file_name() != "net").collect();
        assert!(leftovers.is_empty());
    }
}
