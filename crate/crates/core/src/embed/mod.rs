//! Embedding providers, batching and the on-disk embedding cache.

mod cache;
mod remote;
mod trigram;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{cache_get_or_embed, EmbeddingCache};
pub use remote::RemoteEmbedder;
pub use trigram::{TrigramEmbedder, TRIGRAM_DIM};

/// Environment variable that overrides a remote provider's endpoint.
pub const ENDPOINT_ENV: &str = "ALIGNS_EMBED_ENDPOINT";

pub const PROMPT_PLACEHOLDER: &str = "{indicator}";

/// Prompt used with the remote LLM embedding endpoint.
pub const SUMMARIZE_PROMPT: &str = "Summarize the sentence 'Construct Indicator: {indicator}' in one word:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("no texts to embed")]
    EmptyInput,
    #[error("text {0} is empty")]
    EmptyText(usize),
    #[error("provider failed on batch {batch}: {message}")]
    Provider { batch: usize, message: String },
    #[error("dimension mismatch in batch {batch}: expected {expected}, found {found}")]
    DimensionMismatch { batch: usize, expected: usize, found: usize },
    #[error("invalid provider configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("cache error: {0}")]
    Cache(String),
}

/// A finite embedding with its Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Self { values, norm })
    }

    /// Scales to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbedError> {
        let raw = Self::new(values)?;
        if raw.norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        Self::new(raw.values.iter().map(|v| v / raw.norm).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    DeterministicTest,
    RemoteBatch,
}

/// Where the prompt template is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSide {
    #[default]
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub prompt_template: String,
    #[serde(default)]
    pub prompt_side: PromptSide,
    pub max_batch: usize,
    pub timeout_ms: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    1
}

impl ProviderConfig {
    /// The built-in trigram embedder. The template is the bare indicator so
    /// that shared prompt words do not dominate lexical similarity.
    pub fn deterministic_test() -> Self {
        Self {
            kind: ProviderKind::DeterministicTest,
            endpoint: None,
            prompt_template: PROMPT_PLACEHOLDER.to_string(),
            prompt_side: PromptSide::Client,
            max_batch: 256,
            timeout_ms: 30_000,
            parallelism: 1,
        }
    }

    pub fn remote(endpoint: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::RemoteBatch,
            endpoint: Some(endpoint.into()),
            prompt_template: SUMMARIZE_PROMPT.to_string(),
            prompt_side: PromptSide::Client,
            max_batch: 100,
            timeout_ms: 60_000,
            parallelism: 4,
        }
    }

    /// Replaces the remote endpoint with `$ALIGNS_EMBED_ENDPOINT` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if self.kind == ProviderKind::RemoteBatch {
            if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
                if !endpoint.is_empty() {
                    self.endpoint = Some(endpoint);
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        let placeholders = self.prompt_template.matches(PROMPT_PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(EmbedError::InvalidConfig(format!(
                "prompt_template must contain exactly one {PROMPT_PLACEHOLDER}, found {placeholders}"
            )));
        }
        if self.max_batch == 0 {
            return Err(EmbedError::InvalidConfig("max_batch must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(EmbedError::InvalidConfig("parallelism must be positive".into()));
        }
        if self.kind == ProviderKind::RemoteBatch && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(EmbedError::InvalidConfig("remote-batch provider needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn apply_prompt(&self, text: &str) -> String {
        self.prompt_template.replacen(PROMPT_PLACEHOLDER, text, 1)
    }

    /// Stable identity of everything that influences the produced vectors.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}\0", self.kind));
        if self.kind == ProviderKind::RemoteBatch {
            h.update(self.endpoint.as_deref().unwrap_or(""));
        }
        h.update("\0");
        h.update(&self.prompt_template);
        h.update(format!("\0{:?}", self.prompt_side));
        hex::encode(h.finalize())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::DeterministicTest => Box::new(TrigramEmbedder::new(self.clone())),
            ProviderKind::RemoteBatch => Box::new(RemoteEmbedder::new(self.clone())?),
        })
    }
}

/// Something that turns texts into unit-norm vectors, one per text, in order.
pub trait Embedder: Send + Sync {
    fn fingerprint(&self) -> String;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed_batch(texts)
    }
}

/// One-shot helper: build the provider described by `config` and embed.
pub fn embed_batch(config: &ProviderConfig, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
    config.build()?.embed_batch(texts)
}

pub(crate) fn check_texts(texts: &[String]) -> Result<(), EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(EmbedError::EmptyText(i));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_validation() {
        let mut cfg = ProviderConfig::deterministic_test();
        assert!(cfg.validate().is_ok());
        cfg.prompt_template = "no placeholder".into();
        assert!(matches!(cfg.validate(), Err(EmbedError::InvalidConfig(_))));
        cfg.prompt_template = "{indicator} and {indicator}".into();
        assert!(matches!(cfg.validate(), Err(EmbedError::InvalidConfig(_))));
        assert!(ProviderConfig::remote("http://x").validate().is_ok());
        let mut remote = ProviderConfig::remote("");
        remote.endpoint = None;
        assert!(remote.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_prompt() {
        let a = ProviderConfig::deterministic_test();
        let mut b = a.clone();
        b.prompt_template = "item: {indicator}".into();
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.max_batch = 3;
        assert_eq!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn summarize_prompt_applies() {
        let cfg = ProviderConfig::remote("http://x");
        assert_eq!(cfg.apply_prompt("i felt sad"), "Summarize the sentence 'Construct Indicator: i felt sad' in one word:");
    }

    #[test]
    fn zero_and_nan_vectors_rejected() {
        assert_eq!(EmbeddingVector::normalized(vec![0.0, 0.0]), Err(EmbedError::ZeroVector));
        assert_eq!(EmbeddingVector::new(vec![f64::NAN]), Err(EmbedError::NonFinite));
        let v = EmbeddingVector::normalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);
    }
}
