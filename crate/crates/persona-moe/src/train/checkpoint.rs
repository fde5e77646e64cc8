//! Checkpoint directory format.
//!
//! `manifest.json` records the format version, stage tag, step, resolved
//! config, group digests, and one entry per parameter: name, blob file,
//! shape, and blob SHA-256. Each blob is an 8-byte magic, a u32 rank,
//! little-endian u64 dims, then the values as little-endian f32. Saves go
//! to a temp directory then rename into place, so a torn write can never
//! look like a checkpoint.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::train::config::TrainingConfig;
use crate::train::digest::GroupDigests;

pub const MAGIC: [u8; 8] = *b"PMOETSR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: String,
    step: usize,
    config: TrainingConfig,
    digests: GroupDigests,
    params: Vec<ParamEntry>,
}

fn tensor_to_blob(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 8 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn blob_to_tensor(bytes: &[u8], name: &str) -> Result<Tensor<f32>> {
    let corrupt = |why: &str| Error::CorruptCheckpoint(format!("blob for {name}: {why}"));
    if bytes.len() < 12 {
        return Err(corrupt("shorter than its header"));
    }
    if bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(corrupt("implausible rank"));
    }
    let header = 12 + 8 * ndim;
    if bytes.len() < header {
        return Err(corrupt("truncated shape header"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 12 + 8 * i;
        shape.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(corrupt("payload length disagrees with shape"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = header + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))
}

pub fn save_checkpoint(
    dir: &Path,
    stage: &str,
    step: usize,
    config: &TrainingConfig,
    digests: &GroupDigests,
    entries: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.tmp.{}",
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into()),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let mut params = Vec::with_capacity(entries.len());
    for (i, (name, tensor)) in entries.iter().enumerate() {
        let file = format!("param_{i:04}.bin");
        let blob = tensor_to_blob(tensor);
        let sha = hex::encode(Sha256::digest(&blob));
        fs::write(tmp.join(&file), &blob)?;
        params.push(ParamEntry {
            name: name.clone(),
            file,
            shape: tensor.shape().to_vec(),
            sha256: sha,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        step,
        config: config.clone(),
        digests: digests.clone(),
        params,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub stage: String,
    pub step: usize,
    pub config: TrainingConfig,
    pub digests: GroupDigests,
    pub params: HashMap<String, Tensor<f32>>,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::CorruptCheckpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| Error::CorruptCheckpoint(format!("manifest does not parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut params = HashMap::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let blob = fs::read(dir.join(&entry.file))
            .map_err(|e| Error::CorruptCheckpoint(format!("cannot read blob {}: {e}", entry.file)))?;
        let sha = hex::encode(Sha256::digest(&blob));
        if sha != entry.sha256 {
            return Err(Error::CorruptCheckpoint(format!(
                "blob {} fails its digest (manifest {}, actual {})",
                entry.file, entry.sha256, sha
            )));
        }
        let tensor = blob_to_tensor(&blob, &entry.name)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::CorruptCheckpoint(format!(
                "blob {} shape {:?} disagrees with manifest {:?}",
                entry.file,
                tensor.shape(),
                entry.shape
            )));
        }
        if params.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate parameter {}", entry.name)));
        }
    }
    Ok(LoadedCheckpoint {
        stage: manifest.stage,
        step: manifest.step,
        config: manifest.config,
        digests: manifest.digests,
        params,
    })
}

/// Copy loaded values into live parameters, matched by name. The name sets
/// must agree exactly; shape mismatches (e.g. a different LoRA rank) are
/// refused with the offending parameter named.
pub fn apply_params(targets: Vec<(String, &mut Tensor<f32>)>, loaded: &LoadedCheckpoint) -> Result<()> {
    if targets.len() != loaded.params.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "checkpoint carries {} parameters, model expects {}",
            loaded.params.len(),
            targets.len()
        )));
    }
    for (name, target) in targets {
        let source = loaded
            .params
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("checkpoint lacks parameter {name}")))?;
        if source.shape() != target.shape() {
            return Err(Error::ParamShape {
                name,
                expected: target.shape().to_vec(),
                found: source.shape().to_vec(),
            });
        }
        target.data_mut().copy_from_slice(source.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("w".to_string(), Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![-1.0, 0.5])),
        ]
    }

    fn digests() -> GroupDigests {
        GroupDigests { base: "x".into(), adapters: "y".into(), router: "z".into() }
    }

    fn save_sample(dir: &Path) {
        let owned = entries();
        let refs: Vec<(String, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(dir, "stage2", 17, &TrainingConfig::desk(), &digests(), &refs).unwrap();
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save_sample(&dir);
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(loaded.stage, "stage2");
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.config, TrainingConfig::desk());
        for (name, tensor) in entries() {
            assert_eq!(loaded.params[&name], tensor);
        }
        let mut fresh = entries();
        let targets: Vec<(String, &mut Tensor<f32>)> =
            fresh.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        apply_params(targets, &loaded).unwrap();
    }

    #[test]
    fn truncated_blob_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save_sample(&dir);
        let blob = fs::read(dir.join("param_0000.bin")).unwrap();
        fs::write(dir.join("param_0000.bin"), &blob[..blob.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn flipped_byte_fails_the_digest() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save_sample(&dir);
        let mut blob = fs::read(dir.join("param_0001.bin")).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 0xff;
        fs::write(dir.join("param_0001.bin"), &blob).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn future_version_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save_sample(&dir);
        let raw = fs::read_to_string(dir.join("manifest.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&raw).unwrap();
        v["format_version"] = serde_json::json!(99);
        fs::write(dir.join("manifest.json"), v.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(&dir),
            Err(Error::CheckpointVersion { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save_sample(&dir);
        let loaded = load_checkpoint(&dir).unwrap();
        let mut other = vec![
            ("w".to_string(), Tensor::matrix(3, 2, vec![0.0f32; 6]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![0.0f32, 0.0])),
        ];
        let targets: Vec<(String, &mut Tensor<f32>)> =
            other.iter_mut().map(|(n, t)| (n.clone(), t)).collect();
        match apply_params(targets, &loaded) {
            Err(Error::ParamShape { name, expected, found }) => {
                assert_eq!(name, "w");
                assert_eq!(expected, vec![3, 2]);
                assert_eq!(found, vec![2, 3]);
            }
            other => panic!("expected ParamShape, got {other:?}"),
        }
    }

    #[test]
    fn save_replaces_existing_checkpoint_atomically() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save_sample(&dir);
        save_sample(&dir);
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(loaded.params.len(), 2);
        assert!(!tmp.path().join(format!(".ckpt.tmp.{}", std::process::id())).exists());
    }
}
