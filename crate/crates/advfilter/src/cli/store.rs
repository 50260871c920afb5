//! Content-addressed artifact store: every artifact lives under
//! `root/<kind>/<key>/` where the key hashes the producing configuration
//! and the upstream artifact fingerprints. Existing artifacts are never
//! overwritten; a rerun with the same inputs is a no-op.

use crate::error::{Error, Result};
use crate::nn::hex_string;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    pub root: PathBuf,
}

/// Per-artifact manifest linking it to its inputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArtifactManifest {
    pub kind: String,
    pub key: String,
    /// Hash payload: config + upstream fingerprints.
    pub inputs: serde_json::Value,
    /// Content fingerprints of the artifact's own files.
    pub outputs: serde_json::Value,
    pub created_unix: u64,
}

pub const ARTIFACT_MANIFEST: &str = "artifact.json";

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    /// Content key: sha256 of (kind, canonical inputs JSON), truncated.
    pub fn key(&self, kind: &str, inputs: &serde_json::Value) -> String {
        let mut hasher = Sha256::new();
        hasher.update(kind.as_bytes());
        hasher.update(serde_json::to_string(inputs).expect("serializable inputs"));
        hex_string(&hasher.finalize())[..16].to_string()
    }

    pub fn dir(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join(kind).join(key)
    }

    /// An artifact exists once its manifest is in place (manifests are
    /// written last, so interrupted builds are retried).
    pub fn exists(&self, kind: &str, key: &str) -> bool {
        self.dir(kind, key).join(ARTIFACT_MANIFEST).is_file()
    }

    pub fn read_manifest(&self, kind: &str, key: &str) -> Result<ArtifactManifest> {
        let path = self.dir(kind, key).join(ARTIFACT_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact(format!("{kind}/{key}")))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Build an artifact if missing: `build` populates the directory, then
    /// the manifest seals it.
    pub fn ensure<F>(
        &self,
        kind: &str,
        inputs: &serde_json::Value,
        build: F,
    ) -> Result<(PathBuf, String, bool)>
    where
        F: FnOnce(&Path) -> Result<serde_json::Value>,
    {
        let key = self.key(kind, inputs);
        let dir = self.dir(kind, &key);
        if self.exists(kind, &key) {
            return Ok((dir, key, false));
        }
        std::fs::create_dir_all(&dir)?;
        let outputs = build(&dir)?;
        let manifest = ArtifactManifest {
            kind: kind.to_string(),
            key: key.clone(),
            inputs: inputs.clone(),
            outputs,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        std::fs::write(
            dir.join(ARTIFACT_MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok((dir, key, true))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensure_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let inputs = serde_json::json!({"a": 1});
        let mut builds = 0;
        for _ in 0..2 {
            let (path, _, built) = store
                .ensure("thing", &inputs, |d| {
                    builds += 1;
                    std::fs::write(d.join("data.txt"), "payload")?;
                    Ok(serde_json::json!({"file": "data.txt"}))
                })
                .unwrap();
            assert!(path.join("data.txt").exists());
        }
        assert_eq!(builds, 1, "second run must be a no-op");

        // different inputs get a different key
        let k1 = store.key("thing", &inputs);
        let k2 = store.key("thing", &serde_json::json!({"a": 2}));
        assert_ne!(k1, k2);
    }
}
