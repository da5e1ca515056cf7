//! Append-only JSONL log of stage executions.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATUS_COMPLETED: &str = "completed";
pub const STATUS_SKIPPED_ABLATION: &str = "skipped(ablation)";
pub const STATUS_SKIPPED_JOINT: &str = "skipped(joint)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the workdir, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub status: String,
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub duration_ms: u64,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn file_hash(workdir: &Path, rel: &str) -> Result<FileHash> {
    let path = workdir.join(rel);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    Ok(FileHash {
        path: rel.to_string(),
        sha256: hash_file(&path)?,
    })
}

#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn open(workdir: &Path) -> Result<Self> {
        let path = workdir.join(MANIFEST_FILE);
        let entries = if path.exists() {
            read_jsonl(&path)?.into_iter().map(|(_, e)| e).collect()
        } else {
            Vec::new()
        };
        Ok(Manifest { path, entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn append(&mut self, entry: ManifestEntry) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut line = serde_json::to_string(&entry).expect("manifest entry serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(entry);
        Ok(())
    }

    /// Most recent entry for `stage`.
    pub fn latest(&self, stage: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }

    /// Most recent entry that wrote `rel`.
    pub fn producer_of(&self, rel: &str) -> Option<&ManifestEntry> {
        self.entries.iter().rev().find(|e| e.outputs.iter().any(|o| o.path == rel))
    }

    /// Hashes the inputs of a stage, rejecting any that are missing, were
    /// produced under a different configuration, or were modified after
    /// being written.
    pub fn check_inputs(&self, workdir: &Path, inputs: &[&str], config_hash: &str) -> Result<Vec<FileHash>> {
        inputs
            .iter()
            .map(|rel| {
                let h = file_hash(workdir, rel)?;
                let producer = self
                    .producer_of(rel)
                    .ok_or_else(|| Error::Stale(format!("{rel} has no manifest entry")))?;
                if producer.config_hash != config_hash {
                    return Err(Error::Stale(format!(
                        "{rel} was produced by stage {} under config {}, current config is {}",
                        producer.stage, producer.config_hash, config_hash
                    )));
                }
                let recorded = producer.outputs.iter().find(|o| o.path == *rel).expect("found above");
                if recorded.sha256 != h.sha256 {
                    return Err(Error::Stale(format!("{rel} changed since stage {} wrote it", producer.stage)));
                }
                Ok(h)
            })
            .collect()
    }

    pub fn rewrite(workdir: &Path, entries: &[ManifestEntry]) -> Result<()> {
        write_jsonl(&workdir.join(MANIFEST_FILE), entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, cfg: &str, outputs: Vec<FileHash>) -> ManifestEntry {
        ManifestEntry {
            stage: stage.into(),
            status: STATUS_COMPLETED.into(),
            config_hash: cfg.into(),
            inputs: vec![],
            outputs,
            duration_ms: 1,
        }
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::open(dir.path()).unwrap();
        m.append(entry("a", "h", vec![])).unwrap();
        m.append(entry("b", "h", vec![])).unwrap();
        m.append(entry("a", "h2", vec![])).unwrap();
        let m = Manifest::open(dir.path()).unwrap();
        assert_eq!(m.entries().len(), 3);
        assert_eq!(m.latest("a").unwrap().config_hash, "h2");
    }

    #[test]
    fn stale_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.txt"), "hello").unwrap();
        let mut m = Manifest::open(dir.path()).unwrap();
        assert!(matches!(m.check_inputs(dir.path(), &["x.txt"], "h"), Err(Error::Stale(_))));
        m.append(entry("a", "h", vec![file_hash(dir.path(), "x.txt").unwrap()])).unwrap();
        assert_eq!(m.check_inputs(dir.path(), &["x.txt"], "h").unwrap().len(), 1);
        assert!(matches!(m.check_inputs(dir.path(), &["x.txt"], "other"), Err(Error::Stale(_))));
        std::fs::write(dir.path().join("x.txt"), "changed").unwrap();
        assert!(matches!(m.check_inputs(dir.path(), &["x.txt"], "h"), Err(Error::Stale(_))));
        assert!(matches!(m.check_inputs(dir.path(), &["y.txt"], "h"), Err(Error::MissingInput(_))));
    }
}
