//! Record of every artifact in a work directory: which configuration hash
//! produced it, from which inputs, and the digest of its bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Ablations;
use crate::error::{Error, Result};
use crate::model::checkpoint;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Hex SHA-256 of `parts`, each length-prefixed.
pub fn digest<S: AsRef<[u8]>>(parts: &[S]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("clusum".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        (
            "checkpoint_format".to_string(),
            checkpoint::VERSION.to_string(),
        ),
        ("manifest_format".to_string(), MANIFEST_VERSION.to_string()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    /// Hash of the configuration slice and inputs that determine the file.
    pub config_hash: String,
    pub sha256: String,
    pub seed: u64,
    /// Files this one was computed from.
    pub inputs: Vec<String>,
    pub ablations: Ablations,
    pub versions: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// The manifest of `dir`, empty when none was written yet.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = Manifest::path(dir);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let raw = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = Manifest::path(dir);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Checks that `name` was recorded under `config_hash` and that its
    /// bytes are unchanged.
    pub fn verify(&self, dir: &Path, name: &str, stage: &str, config_hash: &str) -> Result<()> {
        let path = dir.join(name);
        if !path.exists() {
            if let Some(other) = self.artifacts.values().find(|r| r.stage == stage) {
                return Err(Error::HashMismatch {
                    expected: config_hash.to_string(),
                    found: other.config_hash.clone(),
                });
            }
            return Err(Error::Config(format!(
                "no {stage} artifact in {}; run the {stage} step first",
                dir.display()
            )));
        }
        let record = self
            .artifacts
            .get(name)
            .ok_or_else(|| Error::Data(format!("{name} is not in the manifest")))?;
        if record.config_hash != config_hash {
            return Err(Error::HashMismatch {
                expected: config_hash.to_string(),
                found: record.config_hash.clone(),
            });
        }
        let actual = file_digest(&path)?;
        if actual != record.sha256 {
            return Err(Error::HashMismatch {
                expected: record.sha256.clone(),
                found: actual,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(hash: &str, sha: &str) -> ArtifactRecord {
        ArtifactRecord {
            stage: "vocab".into(),
            config_hash: hash.into(),
            sha256: sha.into(),
            seed: 0,
            inputs: Vec::new(),
            ablations: Ablations::default(),
            versions: versions(),
        }
    }

    #[test]
    fn digest_separates_parts() {
        assert_ne!(digest(&["ab", "c"]), digest(&["a", "bc"]));
        assert_eq!(digest(&["x"]), digest(&["x"]));
    }

    #[test]
    fn verification_catches_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("vocab-a.txt"), "x\n").unwrap();
        let sha = file_digest(&dir.path().join("vocab-a.txt")).unwrap();
        let mut m = Manifest::default();
        m.artifacts.insert("vocab-a.txt".into(), record("a", &sha));
        m.save(dir.path()).unwrap();
        let m = Manifest::load(dir.path()).unwrap();

        assert!(m.verify(dir.path(), "vocab-a.txt", "vocab", "a").is_ok());
        let other = m
            .verify(dir.path(), "vocab-b.txt", "vocab", "b")
            .unwrap_err();
        assert!(matches!(other, Error::HashMismatch { ref found, .. } if found == "a"));
        assert!(matches!(
            m.verify(dir.path(), "clusters-a.jsonl", "clusters", "a"),
            Err(Error::Config(_))
        ));

        fs::write(dir.path().join("vocab-a.txt"), "y\n").unwrap();
        assert!(matches!(
            m.verify(dir.path(), "vocab-a.txt", "vocab", "a"),
            Err(Error::HashMismatch { .. })
        ));
    }
}
