//! Run manifest: config hash, seed, version, timestamps, artifact paths.
//! Written once before training and finalized on completion.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use graphpl_core::Result;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub artifacts: BTreeMap<String, String>,
}

pub fn config_hash(config_text: &str) -> String {
    let digest = Sha256::digest(config_text.as_bytes());
    format!("sha256:{:x}", digest)
}

impl RunManifest {
    pub fn start(config: &ExperimentConfig, config_text: &str) -> Self {
        Self {
            config_hash: config_hash(config_text),
            seed: config.seed,
            method: config.method.tag().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
            status: "running".into(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn add_artifact(&mut self, key: &str, relative_path: &str) {
        self.artifacts.insert(key.into(), relative_path.into());
    }

    pub fn finish(&mut self, artifacts: &[(&str, &str)]) {
        for (key, path) in artifacts {
            self.add_artifact(key, path);
        }
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.status = "complete".into();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| graphpl_core::Error::Config(format!("bad manifest: {e}")))
    }
}
