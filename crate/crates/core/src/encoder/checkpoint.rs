//! Parameter checkpoints: a JSON manifest listing every tensor by name and
//! shape, plus a payload file holding the values as little-endian `f64` in
//! manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ArchConfig;
use crate::nn::ParamStore;
use crate::{Error, Result};

const FORMAT: &str = "osda-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub arch: ArchConfig,
    /// File name of the payload, relative to the manifest.
    pub payload: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<f64>,
}

impl Checkpoint {
    /// Gathers every tensor of each store, naming them `group/name`.
    pub fn new(
        seed: u64,
        arch: &ArchConfig,
        meta: serde_json::Value,
        groups: &[(&str, &ParamStore)],
    ) -> Self {
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for (group, store) in groups {
            for id in store.ids() {
                let t = store.value(id);
                entries.push(ManifestEntry {
                    name: format!("{group}/{}", store.name(id)),
                    shape: t.shape().to_vec(),
                });
                values.extend_from_slice(t.data());
            }
        }
        Checkpoint {
            manifest: Manifest {
                format: FORMAT.into(),
                seed,
                arch: arch.clone(),
                payload: String::new(),
                entries,
                meta,
            },
            values,
        }
    }

    /// Copies the tensors of `group` into `store`, checking names and shapes.
    pub fn restore(&self, group: &str, store: &mut ParamStore) -> Result<()> {
        let prefix = format!("{group}/");
        let mut offset = 0;
        let mut found = Vec::new();
        for e in &self.manifest.entries {
            let n: usize = e.shape.iter().product();
            if let Some(name) = e.name.strip_prefix(&prefix) {
                found.push((name, &e.shape, offset));
            }
            offset += n;
        }
        if found.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint group {group:?} has {} tensors, expected {}",
                found.len(),
                store.len()
            )));
        }
        for (id, (name, shape, off)) in store.ids().collect::<Vec<_>>().into_iter().zip(found) {
            if store.name(id) != name || store.value(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name:?} {shape:?} does not match {:?} {:?}",
                    store.name(id),
                    store.value(id).shape()
                )));
            }
            let n = store.value(id).len();
            store.value_mut(id).data_mut().copy_from_slice(&self.values[off..off + n]);
        }
        Ok(())
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut manifest = ckpt.manifest.clone();
    manifest.payload = format!("{stem}.bin");
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mpath = dir.join(format!("{stem}.json"));
    let ppath = dir.join(&manifest.payload);
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    std::fs::write(&ppath, ckpt.payload_bytes()).map_err(|e| Error::io(&ppath, e))?;
    Ok(mpath)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            offset: 0,
            message: format!("unknown checkpoint format {:?}", manifest.format),
        });
    }
    let ppath = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.payload);
    let raw = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected: usize = manifest
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if raw.len() != 8 * expected {
        return Err(Error::Format {
            offset: raw.len().min(8 * expected),
            message: format!("payload has {} bytes, manifest needs {}", raw.len(), 8 * expected),
        });
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: 8 * i,
            message: "non-finite parameter".into(),
        });
    }
    Ok(Checkpoint { manifest, values })
}
