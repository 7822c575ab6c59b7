use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{Architecture, ModelParams, ModelShape};
use super::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub network: String,
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: Architecture,
    pub k: usize,
    pub seed: u64,
    pub shape: ModelShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_shape: Option<ModelShape>,
    pub blocks: Vec<BlockEntry>,
    /// Free-form training configuration, stored for provenance.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write `manifest` JSON plus a little-endian `f32` parameter blob next to it.
pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>, seed: u64, config: serde_json::Value) -> Result<PathBuf> {
    let mut blob = Vec::new();
    let mut blocks = Vec::new();
    let mut offset = 0;
    let nets = std::iter::once(("vqa", &model.vqa)).chain(model.detector.as_ref().map(|d| ("detector", d)));
    for (network, params) in nets {
        for (name, values) in params.blocks() {
            blocks.push(BlockEntry {
                network: network.into(),
                name: name.into(),
                offset,
                len: values.len(),
            });
            offset += values.len();
            for v in values {
                blob.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
    }
    let manifest = CheckpointManifest {
        arch: model.arch,
        k: model.k(),
        seed,
        shape: model.vqa.shape,
        detector_shape: model.detector.as_ref().map(|d| d.shape),
        blocks,
        config,
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(path, e))?;
    let bin = blob_path(path);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    Ok(bin)
}

fn fill<T: Scalar>(params: &mut ModelParams<T>, network: &str, manifest: &CheckpointManifest, values: &[f32]) -> Result<()> {
    for (name, dst) in params.blocks_mut() {
        let entry = manifest
            .blocks
            .iter()
            .find(|b| b.network == network && b.name == name)
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks block {network}/{name}")))?;
        if entry.len != dst.len() || entry.offset + entry.len > values.len() {
            return Err(Error::Shape(format!(
                "block {network}/{name}: expected {} values, manifest says {} at {}",
                dst.len(),
                entry.len,
                entry.offset
            )));
        }
        for (d, &v) in dst.iter_mut().zip(&values[entry.offset..entry.offset + entry.len]) {
            *d = T::of(v as f64);
        }
    }
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointManifest)> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: e.line(),
        field: "<manifest>".into(),
        message: e.to_string(),
    })?;
    let bin = blob_path(path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!("{}: length not a multiple of 4", bin.display())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{}: non-finite parameter", bin.display())));
    }
    let mut vqa = ModelParams::zeros(manifest.shape);
    fill(&mut vqa, "vqa", &manifest, &values)?;
    let detector = match manifest.detector_shape {
        Some(s) => {
            let mut d = ModelParams::zeros(s);
            fill(&mut d, "detector", &manifest, &values)?;
            Some(d)
        }
        None => None,
    };
    if (manifest.arch == Architecture::Separated) != detector.is_some() {
        return Err(Error::invalid("only separated checkpoints carry a detector network"));
    }
    Ok((
        Model {
            arch: manifest.arch,
            vqa,
            detector,
        },
        manifest,
    ))
}
