use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{io, write, PipelineError, Result};
use crate::training::ExperimentConfig;

/// What a run directory contains and which config produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub source_revision: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Artifact name → path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn revision() -> String {
    if let Some(r) = option_env!("DJESCC_REVISION") {
        return r.to_string();
    }
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| format!("unknown (v{})", env!("CARGO_PKG_VERSION")))
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(cfg: &ExperimentConfig) -> Self {
        let t = now();
        Self {
            run_id: cfg.run.id.clone(),
            config_hash: cfg.hash(),
            source_revision: revision(),
            created_unix: t,
            updated_unix: t,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(Self::FILE);
        let text = std::fs::read_to_string(&p).map_err(io(&p))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Missing(format!("{}: {e}", p.display())))
    }

    pub fn open_or_new(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        if dir.join(Self::FILE).exists() {
            Self::load(dir)
        } else {
            Ok(Self::new(cfg))
        }
    }

    pub fn record(&mut self, name: &str, rel: &str) {
        self.artifacts.insert(name.to_string(), rel.to_string());
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_unix = now();
        write(
            &dir.join(Self::FILE),
            &serde_json::to_string_pretty(self).expect("manifest serializes"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_the_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut m = RunManifest::open_or_new(dir.path(), &cfg).unwrap();
        assert_eq!(m.config_hash, cfg.hash());
        m.record("metrics", "metrics.csv");
        m.save(dir.path()).unwrap();
        let back = RunManifest::open_or_new(dir.path(), &cfg).unwrap();
        assert_eq!(back, m);
    }
}
