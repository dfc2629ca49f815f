use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Provenance record written at the end of every command that produces files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Produced files, relative to the manifest's directory.
    pub files: Vec<PathBuf>,
    pub metrics: serde_json::Value,
}

impl ExperimentManifest {
    pub fn new(command: &str, config: &RunConfig, metrics: serde_json::Value) -> Self {
        ExperimentManifest {
            command: command.into(),
            config: config.clone(),
            seed: config.training.seed,
            config_hash: config.content_hash(),
            files: Vec::new(),
            metrics,
        }
    }

    /// Writes to `dir/name` through a temporary file and a rename, after
    /// checking that every listed file exists.
    pub fn write(&self, dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
        for f in &self.files {
            if !dir.join(f).is_file() {
                bail!("manifest lists {} but it was not written", f.display());
            }
        }
        let path = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
