use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use footscan_core::detector::DetectorConfig;
use footscan_core::domain::BlobStrategy;
use footscan_core::queue::QueueConfig;
use footscan_core::store::{StoreConfig, DEFAULT_MAX_PHOTO_BYTES};
use footscan_core::worker::WorkerConfig;
use serde::Deserialize;

/// Settings read from the TOML config file. Every field is optional; flags
/// and environment variables override what is here.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: SocketAddr,
    pub token: Option<String>,
    pub data_dir: PathBuf,
    pub blob_strategy: BlobStrategy,
    pub max_photo_bytes: u64,
    /// Oldest client version the server accepts.
    pub min_client_version: Option<String>,
    pub detector: DetectorConfig,
    pub worker: WorkerConfig,
    pub queue: QueueConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: footscan_server::DEFAULT_LISTEN.parse().expect("valid default address"),
            token: None,
            data_dir: PathBuf::from("footscan-data"),
            blob_strategy: BlobStrategy::Inline,
            max_photo_bytes: DEFAULT_MAX_PHOTO_BYTES,
            min_client_version: None,
            detector: DetectorConfig::default(),
            worker: WorkerConfig::default(),
            queue: QueueConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn store(&self) -> StoreConfig {
        StoreConfig {
            blob_strategy: self.blob_strategy,
            object_store_root: Some(self.data_dir.join("blobs")),
            max_photo_bytes: self.max_photo_bytes,
            data_path: self.data_dir.join("footscan.db"),
        }
    }

    pub fn require_token(&self) -> anyhow::Result<&str> {
        match self.token.as_deref() {
            Some(t) if !t.trim().is_empty() => Ok(t),
            _ => bail!("an API token is required: pass --token, set FOOTSCAN_TOKEN or add `token` to the config file"),
        }
    }
}
