//! Run manifests and digest helpers.
//!
//! Every CLI command emits exactly one manifest recording its configuration,
//! input digests, seed and produced artifacts, so any run can be reproduced
//! or audited. Reports themselves never contain timestamps; manifests do.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Platform-stable 64-bit hash for deriving per-item seeds.
pub fn stable_hash64(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8+ bytes"))
}

/// Flat record of one command invocation.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Full config snapshot (already-resolved key/value pairs).
    pub config: BTreeMap<String, String>,
    /// Digests of consumed inputs (corpus, checkpoints, ...).
    pub input_digests: BTreeMap<String, String>,
    /// Paths of emitted artifacts with their digests.
    pub artifacts: BTreeMap<String, String>,
    /// Aggregate metrics produced by the run.
    pub metrics: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            started_unix: now_unix(),
            ..Default::default()
        }
    }

    pub fn set_config(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn set_input(&mut self, name: &str, digest: impl ToString) {
        self.input_digests
            .insert(name.to_string(), digest.to_string());
    }

    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        let digest = file_digest(path)?;
        self.artifacts.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn set_metric(&mut self, key: &str, value: impl ToString) {
        self.metrics.insert(key.to_string(), value.to_string());
    }

    pub fn finish(&mut self) {
        self.finished_unix = now_unix();
    }

    /// Serializes as sectioned `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("command={}\n", self.command));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("started_unix={}\n", self.started_unix));
        out.push_str(&format!("finished_unix={}\n", self.finished_unix));
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        for (k, v) in &self.input_digests {
            out.push_str(&format!("input.{k}={v}\n"));
        }
        for (k, v) in &self.artifacts {
            out.push_str(&format!("artifact.{k}={v}\n"));
        }
        for (k, v) in &self.metrics {
            out.push_str(&format!("metric.{k}={v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `text` to `path`, creating parent directories, and refuses to
/// overwrite an existing file with different content (emitted artifacts are
/// immutable).
pub fn write_artifact(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if path.exists() {
        let existing = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if existing == text {
            return Ok(());
        }
        return Err(Error::invalid(format!(
            "refusing to overwrite existing artifact {} with different content",
            path.display()
        )));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a path against a workspace root unless already absolute.
pub fn resolve(root: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        root.join(pb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stable_hash_differs_by_position() {
        assert_ne!(stable_hash64(&[1, 2]), stable_hash64(&[2, 1]));
        assert_eq!(stable_hash64(&[7, 8, 9]), stable_hash64(&[7, 8, 9]));
    }

    #[test]
    fn manifest_text_roundtrips_fields() {
        let mut m = RunManifest::begin("verify", 7);
        m.set_config("steps", 50);
        m.set_metric("order", 0.95);
        m.finish();
        let text = m.to_text();
        assert!(text.contains("command=verify"));
        assert!(text.contains("config.steps=50"));
        assert!(text.contains("metric.order=0.95"));
    }

    #[test]
    fn artifacts_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.tsv");
        write_artifact(&p, "hello\n").unwrap();
        // Same content is fine; different content is refused.
        write_artifact(&p, "hello\n").unwrap();
        assert!(write_artifact(&p, "bye\n").is_err());
    }
}
