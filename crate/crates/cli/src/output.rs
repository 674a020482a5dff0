//! Output directory with a manifest of content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::SCHEMA_VERSION;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    /// False until every output has been written.
    pub complete: bool,
    pub files: Vec<FileEntry>,
}

/// Writes files and keeps the manifest current after every write, so an
/// interrupted run always leaves a manifest marked incomplete.
pub struct OutputDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut out = Self {
            root: root.to_path_buf(),
            manifest: Manifest { schema_version: SCHEMA_VERSION, command: command.into(), complete: false, files: Vec::new() },
        };
        out.flush()?;
        Ok(out)
    }

    fn flush(&mut self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.root.join(MANIFEST), text).context("writing manifest")
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.manifest.files.retain(|f| f.path != name);
        self.manifest.files.push(FileEntry { path: name.into(), bytes: bytes.len(), sha256: hex::encode(Sha256::digest(bytes)) });
        self.flush()
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, text.as_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.complete = true;
        self.flush()
    }
}

/// Shortest round-trip decimal of each value.
pub fn csv_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        let xs = [0.1, 1.0 / 3.0, 2f64.powi(-40), -7.25e300, 0.0];
        let row = csv_row(xs);
        let back: Vec<f64> = row.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(back, xs);
        assert_eq!(csv_row([0.1, 1.0]), "0.1,1");
    }
}
