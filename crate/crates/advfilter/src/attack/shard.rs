//! Adversarial-dataset persistence: one shard file per attack strength plus
//! a JSON manifest with the threat-model fingerprint and shard checksums.

use super::{AdversarialPair, AttackSpec, NormTag};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, LabeledImage};
use crate::nn::hex_string;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const SHARD_MAGIC: &[u8; 8] = b"AFSH0001";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShardEntry {
    pub eps_label: String,
    pub eps: f64,
    /// PGD iterations used for this shard.
    pub iterations: usize,
    pub file: String,
    pub sha256: String,
    pub count: usize,
}

/// Manifest describing a sharded adversarial dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackManifest {
    pub threat_fingerprint: String,
    pub iterations: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub images_per_strength: usize,
    pub shards: Vec<ShardEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Serialize one strength's pairs. Record layout: label u16 LE, clean f32
/// H·W·3 LE, delta f32 H·W·3 LE (delta is the stored source of truth;
/// adversarial = clean + delta exactly).
pub fn write_shard(path: &Path, pairs: &[AdversarialPair]) -> Result<ShardEntry> {
    assert!(!pairs.is_empty());
    let spec = pairs[0].spec;
    let (h, w) = (pairs[0].clean.image.height(), pairs[0].clean.image.width());
    let mut buf: Vec<u8> = Vec::with_capacity(16 + pairs.len() * (2 + h * w * 24));
    buf.extend_from_slice(SHARD_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec.epsilon.to_le_bytes());
    buf.extend_from_slice(&(spec.iterations as u32).to_le_bytes());
    for p in pairs {
        debug_assert_eq!(p.spec.epsilon, spec.epsilon);
        buf.extend_from_slice(&(p.clean.label as u16).to_le_bytes());
        for v in p.clean.image.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (a, c) in p.adversarial.data.iter().zip(p.clean.image.data.iter()) {
            buf.extend_from_slice(&(a - c).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    let sha = hex_string(&Sha256::digest(&buf));
    Ok(ShardEntry {
        eps_label: super::eps_label(spec.epsilon),
        eps: spec.epsilon,
        iterations: spec.iterations,
        file: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: sha,
        count: pairs.len(),
    })
}

/// Read a shard back, verifying its checksum first.
pub fn read_shard(path: &Path, entry: &ShardEntry) -> Result<Vec<AdversarialPair>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(format!("shard {}", path.display())))?
        .read_to_end(&mut bytes)?;
    let sha = hex_string(&Sha256::digest(&bytes));
    if sha != entry.sha256 {
        return Err(Error::ShardChecksum(entry.file.clone()));
    }
    parse_shard(&bytes, path)
}

fn parse_shard(bytes: &[u8], path: &Path) -> Result<Vec<AdversarialPair>> {
    let bad = || Error::Dataset(format!("malformed shard {}", path.display()));
    if bytes.len() < 32 || &bytes[..8] != SHARD_MAGIC {
        return Err(bad());
    }
    let rd_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let h = rd_u32(8);
    let w = rd_u32(12);
    let count = rd_u32(16);
    let eps = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let iterations = rd_u32(28);
    let spec = AttackSpec {
        iterations,
        epsilon: eps,
        step_size: if iterations > 0 {
            2.5 * eps / iterations as f64
        } else {
            0.0
        },
        norm: NormTag::LInf,
    };
    let plane = h * w * 3;
    let rec_len = 2 + plane * 8;
    if bytes.len() != 32 + count * rec_len {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(count);
    let mut off = 32;
    for _ in 0..count {
        let label = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        let mut clean = ImageTensor::zeros(h, w);
        for v in clean.data.iter_mut() {
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            off += 4;
        }
        let mut adv = clean.clone();
        for v in adv.data.iter_mut() {
            let d = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            off += 4;
            *v += d;
        }
        out.push(AdversarialPair {
            clean: LabeledImage {
                image: clean,
                label,
            },
            adversarial: adv,
            spec,
        });
    }
    Ok(out)
}

/// On-disk sharded dataset handle: verifies the manifest and loads shards
/// by strength label on demand.
pub struct AttackDatasetDir {
    pub root: PathBuf,
    pub manifest: AttackManifest,
}

impl AttackDatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath)
            .map_err(|_| Error::MissingArtifact(format!("attack manifest {}", mpath.display())))?;
        let manifest: AttackManifest = serde_json::from_str(&text)?;
        Ok(AttackDatasetDir {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Strength labels at the manifest's default iteration count.
    pub fn eps_labels(&self) -> Vec<String> {
        self.manifest
            .shards
            .iter()
            .filter(|s| s.iterations == self.manifest.iterations)
            .map(|s| s.eps_label.clone())
            .collect()
    }

    pub fn load_eps(&self, eps_label: &str) -> Result<Vec<AdversarialPair>> {
        self.load_cell(eps_label, self.manifest.iterations)
    }

    pub fn load_cell(&self, eps_label: &str, iterations: usize) -> Result<Vec<AdversarialPair>> {
        let entry = self
            .manifest
            .shards
            .iter()
            .find(|s| s.eps_label == eps_label && s.iterations == iterations)
            .ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "shard for epsilon {eps_label} n={iterations} in {}",
                    self.root.display()
                ))
            })?;
        read_shard(&self.root.join(&entry.file), entry)
    }
}

pub fn write_manifest(root: &Path, manifest: &AttackManifest) -> Result<()> {
    std::fs::create_dir_all(root)?;
    std::fs::write(
        root.join(MANIFEST_FILE),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{build_attack_dataset, eps_label};
    use crate::classifier::{ClassifierTrainConfig, SmallResNet};
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn shard_roundtrip_and_checksum() {
        let mut rng = crate::nn::seed_rng(1, "shard-test");
        let data: Vec<LabeledImage> = (0..6)
            .map(|i| LabeledImage {
                image: ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| {
                    rng.gen_range(0.2..0.8f32)
                }))
                .unwrap(),
                label: i % 2,
            })
            .collect();
        let mut model = SmallResNet::new(2, 4, 2);
        crate::classifier::train_classifier(
            &mut model,
            &data,
            &ClassifierTrainConfig {
                epochs: 2,
                batch_size: 4,
                lr: 1e-3,
                seed: 0,
            },
        )
        .unwrap();
        let pairs = build_attack_dataset(&model, &data, &[0.01], 3, 5).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let spath = dir.path().join(format!("eps_{}.bin", eps_label(0.01)));
        let entry = write_shard(&spath, &pairs).unwrap();
        assert_eq!(entry.count, 6);

        let loaded = read_shard(&spath, &entry).unwrap();
        assert_eq!(loaded.len(), pairs.len());
        for (a, b) in loaded.iter().zip(&pairs) {
            assert_eq!(a.clean.label, b.clean.label);
            assert_eq!(a.clean.image, b.clean.image);
            assert_eq!(a.adversarial, b.adversarial);
            a.validate().unwrap();
        }

        // corrupt one byte: named checksum failure
        let mut bytes = std::fs::read(&spath).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&spath, &bytes).unwrap();
        match read_shard(&spath, &entry) {
            Err(Error::ShardChecksum(name)) => assert_eq!(name, entry.file),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }
}
