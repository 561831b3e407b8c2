//! Checkpoints: `manifest.json` plus one little-endian `f64` blob per factor,
//! `layer<i>.<L|R|core|U1..U4|W>.bin`. Dense parameters outside the
//! compressed layers go to `<name>.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{Model, ModelSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub weight_rank: Option<usize>,
    pub activation_ranks: Option<Vec<usize>>,
    pub blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub seed: u64,
    pub layers: Vec<LayerEntry>,
    pub dense: Vec<BlobEntry>,
}

pub fn write_blob(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_checkpoint(dir: &Path, model: &Model, cfg: &TrainConfig) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let mut blobs = Vec::new();
        for (name, shape, data) in layer.blobs() {
            let file = format!("layer{i}.{name}.bin");
            write_blob(&dir.join(&file), &data)?;
            blobs.push(BlobEntry { file, shape });
        }
        layers.push(LayerEntry {
            weight_rank: layer.rank(),
            activation_ranks: layer.activation_ranks().map(<[usize]>::to_vec),
            blobs,
        });
    }
    let mut dense = Vec::new();
    for (name, shape, data) in model.dense_blobs() {
        let file = format!("{name}.bin");
        write_blob(&dir.join(&file), &data)?;
        dense.push(BlobEntry { file, shape });
    }
    let manifest = Manifest { config: cfg.clone(), model: model.spec().clone(), seed: cfg.seed, layers, dense };
    crate::json::to_file(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a manifest and checks that every blob it lists has the stated size.
pub fn read_checkpoint(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = crate::json::from_file(&dir.join("manifest.json"))?;
    for blob in manifest.layers.iter().flat_map(|l| &l.blobs).chain(&manifest.dense) {
        let path = dir.join(&blob.file);
        let n = read_blob(&path)?.len();
        if n != blob.shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{}: {n} values for shape {:?}", path.display(), blob.shape)));
        }
    }
    Ok(manifest)
}
