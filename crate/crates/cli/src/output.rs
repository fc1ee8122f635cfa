//! Staged outputs and the run manifest.
//!
//! Commands stage every output in memory and only write once all of them
//! were produced, so a failing run leaves no new files behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

pub struct Staged {
    root: PathBuf,
    files: BTreeMap<PathBuf, Vec<u8>>,
}

impl Staged {
    pub fn new(root: &Path) -> Self {
        Staged {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    /// Resolves a user-supplied output path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// `path` is relative to the output directory unless absolute.
    pub fn add(&mut self, path: impl AsRef<Path>, bytes: Vec<u8>) {
        self.files.insert(path.as_ref().to_path_buf(), bytes);
    }

    pub fn add_json<T: Serialize>(&mut self, path: impl AsRef<Path>, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(path, text.into_bytes());
        Ok(())
    }

    /// Writes every staged file, then the run manifest listing them.
    pub fn commit(self, record: RunRecord, seed: u64, manifest_path: &Path) -> Result<()> {
        let outputs: Vec<String> = self.files.keys().map(|p| p.display().to_string()).collect();
        for (rel, bytes) in &self.files {
            let path = self.resolve(rel);
            conic_core::io::write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        let manifest = RunManifest {
            tool: "conic",
            version: env!("CARGO_PKG_VERSION"),
            core_version: conic_core::VERSION,
            command: record.command,
            seed,
            inputs: record.inputs,
            parameters: record.parameters,
            outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.resolve(manifest_path);
        conic_core::io::write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

pub struct RunRecord {
    pub command: &'static str,
    pub inputs: Vec<String>,
    pub parameters: Value,
}

/// Everything needed to rerun a command. Thread counts and timestamps are
/// left out so reruns stay byte-identical.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'static str,
    seed: u64,
    inputs: Vec<String>,
    parameters: Value,
    outputs: Vec<String>,
}
