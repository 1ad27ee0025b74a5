//! Checkpoint serialization: a UTF-8 JSON manifest listing each parameter's
//! name, shape and byte offset, next to a raw blob of little-endian 32-bit
//! floats in manifest order. The blob stays f32 on disk even when the crate
//! is built in f64 mode.

use crate::tensor::ParamSet;
use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: &str = "tsd-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this parameter's first float in the blob.
    pub offset: u64,
}

/// Manifest half of a checkpoint. `extra` carries model/run configuration as
/// opaque JSON so higher layers can round-trip their settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub params: Vec<ParamRecord>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Plain-data snapshot of a parameter set; `Send`, unlike a live graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub entries: Vec<(String, Vec<usize>, Vec<Real>)>,
}

impl Snapshot {
    pub fn of(params: &ParamSet) -> Self {
        Snapshot {
            entries: params
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
                .collect(),
        }
    }

    /// Write values back into a structurally identical parameter set.
    pub fn restore(&self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} parameters, set has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (param, (name, shape, data)) in params.iter_mut().zip(&self.entries) {
            if &param.name != name || &param.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    param.name, param.shape, name, shape
                )));
            }
            param.data.copy_from_slice(data);
        }
        Ok(())
    }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut os = manifest_path.as_os_str().to_owned();
    os.push(".bin");
    PathBuf::from(os)
}

/// Save a snapshot: manifest JSON at `path`, blob at `path + ".bin"`.
pub fn save(path: &Path, snapshot: &Snapshot, extra: serde_json::Value) -> Result<()> {
    let blob_file = blob_path(path);
    let mut records = Vec::with_capacity(snapshot.entries.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in &snapshot.entries {
        records.push(ParamRecord {
            name: name.clone(),
            shape: shape.clone(),
            offset: blob.len() as u64,
        });
        for &v in data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params: records,
        extra,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(&blob_file, blob)?;
    Ok(())
}

/// Load a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<(Snapshot, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    let blob_file = path
        .parent()
        .map(|d| d.join(&manifest.blob))
        .unwrap_or_else(|| PathBuf::from(&manifest.blob));
    let blob = std::fs::read(&blob_file)?;
    let mut entries = Vec::with_capacity(manifest.params.len());
    for rec in &manifest.params {
        let numel: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob too short for `{}`: need {end} bytes, have {}",
                rec.name,
                blob.len()
            )));
        }
        let data: Vec<Real> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Real)
            .collect();
        entries.push((rec.name.clone(), rec.shape.clone(), data));
    }
    Ok((Snapshot { entries }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_through_disk() {
        let mut params = ParamSet::new();
        params.add("a.weight", vec![2, 3], vec![1.0, -2.0, 3.5, 0.25, 4.0, -1.5]);
        params.add("a.bias", vec![2], vec![0.5, -0.5]);
        let snap = Snapshot::of(&params);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &snap, serde_json::json!({"mode": "sibling"})).unwrap();

        let (loaded, manifest) = load(&path).unwrap();
        assert_eq!(loaded, snap);
        assert_eq!(manifest.extra["mode"], "sibling");
        assert_eq!(manifest.params[0].offset, 0);
        assert_eq!(manifest.params[1].offset, 24);

        // restore into a fresh structurally identical set
        let mut fresh = ParamSet::new();
        fresh.add("a.weight", vec![2, 3], vec![0.0; 6]);
        fresh.add("a.bias", vec![2], vec![0.0; 2]);
        loaded.restore(&mut fresh).unwrap();
        assert_eq!(fresh.get(fresh.by_name("a.bias").unwrap()).data, vec![0.5, -0.5]);
    }

    #[test]
    fn blob_is_little_endian_f32() {
        let mut params = ParamSet::new();
        params.add("x", vec![1], vec![1.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save(&path, &Snapshot::of(&params), serde_json::Value::Null).unwrap();
        let blob = std::fs::read(dir.path().join("x.ckpt.bin")).unwrap();
        assert_eq!(blob, 1.0f32.to_le_bytes().to_vec());
    }
}
