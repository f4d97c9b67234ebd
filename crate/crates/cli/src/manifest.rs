use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of one output directory; enough to rerun the command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub timings_s: BTreeMap<String, f64>,
    pub input_fingerprints: BTreeMap<String, String>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub status: u8,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("mfpca", env!("CARGO_PKG_VERSION"));
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            versions,
            timings_s: BTreeMap::new(),
            input_fingerprints: BTreeMap::new(),
            outputs: Vec::new(),
            status: 0,
            notes: Vec::new(),
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_s.insert(stage.to_string(), start.elapsed().as_secs_f64());
        out
    }

    pub fn output(&mut self, out_dir: &Path, path: &Path) {
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.outputs.push(rel.display().to_string());
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, Failure> {
        let path = out_dir.join(MANIFEST_FILE);
        mfpca::export::write_json(self, &path)?;
        Ok(path)
    }
}

pub fn prepare_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::invalid(format!("cannot create {}: {e}", dir.display())))
}
