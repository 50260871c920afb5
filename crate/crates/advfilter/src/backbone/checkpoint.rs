//! Self-describing checkpoint container: arch tag, configs, named flat
//! parameter blobs, weight fingerprint, optional optimizer state, and a
//! free-form training-provenance manifest.

use super::{ArchTag, BackboneConfig, DenoiserModel, HeadConfig};
use crate::classifier::SmallResNet;
use crate::error::{Error, Result};
use crate::filtering::FusionNet;
use crate::nn::{fingerprint_params, Param};
use std::io::{Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 8] = b"AFCK0001";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub arch: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub fingerprint: String,
    pub with_opt: bool,
    pub provenance: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    arch: &str,
    config: serde_json::Value,
    params: &[&Param],
    provenance: serde_json::Value,
    with_opt: bool,
) -> Result<String> {
    let header = CheckpointHeader {
        arch: arch.to_string(),
        config,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                len: p.data.len(),
                steps: p.steps,
            })
            .collect(),
        fingerprint: fingerprint_params(params.iter().copied()),
        with_opt,
        provenance,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    let write_arr = |f: &mut std::io::BufWriter<std::fs::File>, arr: &[f32]| -> Result<()> {
        let mut buf = Vec::with_capacity(arr.len() * 4);
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    };
    for p in params {
        write_arr(&mut f, &p.data)?;
        if with_opt {
            write_arr(&mut f, &p.m)?;
            write_arr(&mut f, &p.v)?;
        }
    }
    f.flush()?;
    Ok(header.fingerprint)
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    arrays: Vec<Vec<f32>>,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|_| {
        Error::MissingArtifact(format!("checkpoint {}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    let per_param = if header.with_opt { 3 } else { 1 };
    let mut arrays = Vec::with_capacity(header.params.len() * per_param);
    for entry in &header.params {
        for _ in 0..per_param {
            let mut raw = vec![0u8; entry.len * 4];
            f.read_exact(&mut raw)?;
            arrays.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            );
        }
    }
    Ok(LoadedCheckpoint { header, arrays })
}

impl LoadedCheckpoint {
    /// Copy stored values into matching params (by position; names must
    /// agree) and verify the weight fingerprint.
    pub fn apply(&self, params: &mut [&mut Param]) -> Result<()> {
        if params.len() != self.header.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model {}, file {}",
                params.len(),
                self.header.params.len()
            )));
        }
        let per_param = if self.header.with_opt { 3 } else { 1 };
        for (i, (p, entry)) in params.iter_mut().zip(&self.header.params).enumerate() {
            if p.name != entry.name || p.data.len() != entry.len {
                return Err(Error::Checkpoint(format!(
                    "parameter {} mismatch: model has {} ({}), file has {} ({})",
                    i,
                    p.name,
                    p.data.len(),
                    entry.name,
                    entry.len
                )));
            }
            p.data.copy_from_slice(&self.arrays[i * per_param]);
            p.steps = entry.steps;
            if self.header.with_opt {
                p.m.copy_from_slice(&self.arrays[i * per_param + 1]);
                p.v.copy_from_slice(&self.arrays[i * per_param + 2]);
            }
        }
        let got = fingerprint_params(params.iter().map(|p| &**p));
        if got != self.header.fingerprint {
            return Err(Error::FingerprintMismatch {
                path: "checkpoint".into(),
                expected: self.header.fingerprint.clone(),
                got,
            });
        }
        Ok(())
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DenoiserConfig {
    arch: ArchTag,
    backbone: BackboneConfig,
    head: HeadConfig,
}

pub fn save_denoiser(
    path: &Path,
    model: &DenoiserModel,
    provenance: serde_json::Value,
    with_opt: bool,
) -> Result<String> {
    let config = serde_json::to_value(DenoiserConfig {
        arch: model.arch(),
        backbone: model.backbone(),
        head: model.head_cfg(),
    })?;
    save_checkpoint(
        path,
        &model.arch().to_string(),
        config,
        &model.params(),
        provenance,
        with_opt,
    )
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserModel, CheckpointHeader)> {
    let loaded = read_checkpoint(path)?;
    let cfg: DenoiserConfig = serde_json::from_value(loaded.header.config.clone())?;
    let k = match cfg.head.kind {
        super::HeadKind::Additive => 3, // ignored by additive construction
        super::HeadKind::Filtering => cfg.head.filter_size,
    };
    let mut model = DenoiserModel::new(cfg.arch, k, cfg.backbone, 0)?;
    loaded.apply(&mut model.params_mut())?;
    Ok((model, loaded.header))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ClassifierConfig {
    num_classes: usize,
    base_channels: usize,
}

pub fn save_classifier(
    path: &Path,
    model: &SmallResNet,
    provenance: serde_json::Value,
) -> Result<String> {
    let config = serde_json::to_value(ClassifierConfig {
        num_classes: model.num_classes,
        base_channels: model.base_channels,
    })?;
    save_checkpoint(
        path,
        "small_resnet",
        config,
        &model.params(),
        provenance,
        false,
    )
}

pub fn load_classifier(path: &Path) -> Result<(SmallResNet, CheckpointHeader)> {
    let loaded = read_checkpoint(path)?;
    if loaded.header.arch != "small_resnet" {
        return Err(Error::Checkpoint(format!(
            "expected small_resnet checkpoint, found {}",
            loaded.header.arch
        )));
    }
    let cfg: ClassifierConfig = serde_json::from_value(loaded.header.config.clone())?;
    let mut model = SmallResNet::new(cfg.num_classes, cfg.base_channels, 0);
    loaded.apply(&mut model.params_mut())?;
    Ok((model, loaded.header))
}

pub fn save_fusion(
    path: &Path,
    net: &FusionNet,
    provenance: serde_json::Value,
    with_opt: bool,
) -> Result<String> {
    save_checkpoint(
        path,
        "fusion",
        serde_json::json!({"layers": crate::filtering::FUSION_LAYERS}),
        &net.params(),
        provenance,
        with_opt,
    )
}

pub fn load_fusion(path: &Path) -> Result<(FusionNet, CheckpointHeader)> {
    let loaded = read_checkpoint(path)?;
    if loaded.header.arch != "fusion" {
        return Err(Error::Checkpoint(format!(
            "expected fusion checkpoint, found {}",
            loaded.header.arch
        )));
    }
    let mut net = FusionNet::new(0);
    loaded.apply(&mut net.params_mut())?;
    Ok((net, loaded.header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn denoiser_checkpoint_roundtrip() {
        let cfg = BackboneConfig {
            base_channels: 4,
            bottleneck_channels: 8,
        };
        let model = DenoiserModel::new(ArchTag::UFilt, 3, cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let fp = save_denoiser(&path, &model, serde_json::json!({"note": "test"}), false).unwrap();
        assert_eq!(fp, model.fingerprint());
        let (loaded, header) = load_denoiser(&path).unwrap();
        assert_eq!(loaded.fingerprint(), model.fingerprint());
        assert_eq!(header.provenance["note"], "test");
        assert_eq!(header.arch, "u_filt");
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let cfg = BackboneConfig {
            base_channels: 4,
            bottleneck_channels: 8,
        };
        let model = DenoiserModel::new(ArchTag::UAdd, 0, cfg, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_denoiser(&path, &model, serde_json::Value::Null, false).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0x55;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_denoiser(&path),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn classifier_checkpoint_roundtrip_with_provenance() {
        let model = SmallResNet::new(4, 4, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&path, &model, serde_json::json!({"seed": 9})).unwrap();
        let (loaded, header) = load_classifier(&path).unwrap();
        assert_eq!(loaded.num_classes, 4);
        assert_eq!(header.provenance["seed"], 9);
        use crate::classifier::ThreatModel;
        assert_eq!(loaded.fingerprint(), model.fingerprint());
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let mut net = FusionNet::new(3);
        for p in net.params_mut() {
            for (i, v) in p.m.iter_mut().enumerate() {
                *v = i as f32 * 0.1;
            }
            p.steps = 17;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        save_fusion(&path, &net, serde_json::Value::Null, true).unwrap();
        let (loaded, _) = load_fusion(&path).unwrap();
        for (a, b) in loaded.params().iter().zip(net.params()) {
            assert_eq!(a.m, b.m);
            assert_eq!(a.steps, 17);
        }
    }
}
