//! JSON sidecar describing a run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    pub threads: Option<usize>,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub started_at: f64,
    pub finished_at: f64,
    pub status: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// `runs/a.csv` -> `runs/a.manifest.json`.
pub fn manifest_path_for(metrics: &Path) -> PathBuf {
    metrics.with_extension("manifest.json")
}

impl RunManifest {
    /// Key-sorted JSON.
    pub fn to_json(&self) -> String {
        let config: Map<String, Value> = self
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        let v = json!({
            "artifact_version": env!("CARGO_PKG_VERSION"),
            "config_path": self.config_path.display().to_string(),
            "config_hash": self.config_hash,
            "config": config,
            "seed": self.seed,
            "threads": self.threads,
            "outputs": {
                "metrics": self.metrics_path.display().to_string(),
                "manifest": self.manifest_path.display().to_string(),
            },
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("manifest serializes");
        s.push('\n');
        s
    }
}
