//! Checkpoint directories: `manifest.json` plus one little-endian f32 blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamView, ParamViewMut};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gazereg-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn container_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Container { path: Some(path.to_path_buf()), msg: msg.into() }
}

pub fn save_checkpoint(
    dir: &Path,
    seed: u64,
    config_hash: &str,
    config: serde_json::Value,
    tensors: &[ParamView<'_>],
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let file = format!("{}.f32", t.name);
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for &v in t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), file });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        config,
        tensors: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, (Vec<usize>, Vec<f64>)>)> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(container_err(&mpath, format!("unknown format {:?}", manifest.format)));
    }
    let mut out = BTreeMap::new();
    for t in &manifest.tensors {
        let path = dir.join(&t.file);
        let bytes = fs::read(&path)?;
        let n: usize = t.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(container_err(&path, format!("expected {} bytes, found {}", n * 4, bytes.len())));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        out.insert(t.name.clone(), (t.shape.clone(), data));
    }
    Ok((manifest, out))
}

/// Copies loaded tensors into `views`, checking that names and shapes agree.
pub fn assign_tensors(views: Vec<ParamViewMut<'_>>, tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
    for v in views {
        let (shape, data) = tensors
            .get(&v.name)
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {}", v.name)))?;
        if *shape != v.shape {
            return Err(Error::Shape(format!("tensor {} has shape {:?}, expected {:?}", v.name, shape, v.shape)));
        }
        v.data.copy_from_slice(data);
    }
    Ok(())
}
