//! Atomic artifact writes with a metadata sidecar per file.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const TOOL: &str = "firerisk";

/// Provenance written next to every artifact as `<name>.meta.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
}

pub struct Output {
    dir: PathBuf,
    meta: Metadata,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path, command: &str, seed: u64, config_hash: String) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta: Metadata {
                tool: TOOL,
                version: env!("CARGO_PKG_VERSION"),
                command: command.into(),
                seed,
                config_hash,
            },
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn metadata(&self) -> &Metadata {
        &self.meta
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `bytes` to `name` and its sidecar, each via rename-into-place.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        atomic_write(&path, bytes)?;
        let mut meta = serde_json::to_vec_pretty(&self.meta)?;
        meta.push(b'\n');
        atomic_write(&self.dir.join(format!("{name}.meta.json")), &meta)?;
        log::info!("wrote {}", path.display());
        self.written.push(path.clone());
        Ok(path)
    }

    /// Renders into a buffer with `f`, then writes it.
    pub fn write_with<E>(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Result<PathBuf>
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.write(name, &buf)
    }
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("moving output into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_artifact_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::new(dir.path(), "describe", 7, "abc".into()).unwrap();
        out.write("a.csv", b"x\n1\n").unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), b"x\n1\n");
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("a.csv.meta.json")).unwrap()).unwrap();
        assert_eq!(meta["seed"], 7);
        assert_eq!(meta["config_hash"], "abc");
        assert_eq!(meta["tool"], TOOL);
    }
}
