//! Per-run record of the resolved settings and the hashes of every input and
//! output file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use taskvec::tensor_store::{load_tvkp, Digest};

use crate::exit::{CliResult, OrExit, CONFIG};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub resolved: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, resolved: impl Serialize) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            resolved: serde_json::to_value(resolved).expect("settings serialize"),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    /// Records `path` under its name relative to `root`.
    pub fn output(&mut self, root: &Path, path: &Path) -> CliResult<()> {
        let key = path.strip_prefix(root).unwrap_or(path).display().to_string();
        self.outputs.insert(key, file_hash(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).or_exit(CONFIG, || format!("cannot write {}", path.display()))
    }
}

/// TVKP files hash by content (weights only), anything else by raw bytes.
pub fn file_hash(path: &Path) -> CliResult<String> {
    if path.extension().is_some_and(|e| e == "tvkp") {
        if let Ok(f) = load_tvkp(path) {
            return Ok(format!("content:{}", taskvec::tensor_store::content_hash(&f.weights)));
        }
    }
    let bytes = std::fs::read(path).or_exit(CONFIG, || format!("cannot read {}", path.display()))?;
    Ok(format!("sha256:{}", Digest::of_bytes(&bytes)))
}

/// Sidecar manifest path for a single-file output: `out.tvkp.manifest.json`.
pub fn sidecar(out: &Path) -> std::path::PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
