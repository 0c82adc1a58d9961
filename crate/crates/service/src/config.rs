use std::path::{Path, PathBuf};

use aligns_core::embed::ProviderConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PORT_ENV: &str = "ALIGNS_PORT";
pub const NETWORKS_DIR_ENV: &str = "ALIGNS_NETWORKS_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("invalid {field}: {message}")]
    Invalid { field: &'static str, message: String },
}

/// Service settings, read from TOML and overridden by `ALIGNS_PORT`,
/// `ALIGNS_NETWORKS_DIR` and `ALIGNS_EMBED_ENDPOINT`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub networks_dir: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "ProviderConfig::deterministic_test")]
    pub embed_provider: ProviderConfig,
    #[serde(default = "default_max_upload")]
    pub max_upload_indicators: usize,
    /// Worker threads for the async runtime.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Collection window of the embed batcher.
    #[serde(default = "default_batch_window")]
    pub batch_window_ms: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

fn default_max_upload() -> usize {
    10_000
}

fn default_parallelism() -> usize {
    4
}

fn default_batch_window() -> u64 {
    50
}

impl ServiceConfig {
    pub fn new(networks_dir: impl Into<PathBuf>) -> Self {
        Self {
            networks_dir: networks_dir.into(),
            bind: default_bind(),
            port: default_port(),
            embed_provider: ProviderConfig::deterministic_test(),
            max_upload_indicators: default_max_upload(),
            parallelism: default_parallelism(),
            batch_window_ms: default_batch_window(),
            cache_dir: None,
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    /// Applies environment overrides from `lookup` (normally `std::env::var`).
    pub fn with_overrides<F: Fn(&str) -> Option<String>>(mut self, lookup: F) -> Result<Self, ConfigError> {
        if let Some(port) = lookup(PORT_ENV) {
            self.port = port
                .parse()
                .map_err(|_| ConfigError::Invalid { field: "ALIGNS_PORT", message: format!("`{port}` is not a port number") })?;
        }
        if let Some(dir) = lookup(NETWORKS_DIR_ENV) {
            self.networks_dir = dir.into();
        }
        if let Some(endpoint) = lookup(aligns_core::embed::ENDPOINT_ENV).filter(|e| !e.is_empty()) {
            self.embed_provider.endpoint = Some(endpoint);
        }
        Ok(self)
    }

    pub fn with_env(self) -> Result<Self, ConfigError> {
        self.with_overrides(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.networks_dir.is_dir() {
            return Err(ConfigError::Invalid {
                field: "networks_dir",
                message: format!("{} is not a directory", self.networks_dir.display()),
            });
        }
        if self.max_upload_indicators == 0 {
            return Err(ConfigError::Invalid { field: "max_upload_indicators", message: "must be positive".into() });
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid { field: "parallelism", message: "must be positive".into() });
        }
        self.embed_provider.validate().map_err(|e| ConfigError::Invalid { field: "embed_provider", message: e.to_string() })
    }
}
