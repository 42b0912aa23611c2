//! Checkpoint directories: a `manifest.json` plus one little-endian `f32`
//! file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{ArcFaceHead, HeadParameters, LinearHead, ReidModel};
use crate::space::Space;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    #[serde(rename = "D")]
    pub input_dim: usize,
    #[serde(rename = "d")]
    pub embed_dim: usize,
    #[serde(rename = "K")]
    pub classes: usize,
    pub spaces: Vec<Space>,
    pub s_arc: f64,
    pub m_arc: f64,
    pub use_bias: bool,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::MalformedFile(format!(
            "tensor byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn tensors_of(model: &ReidModel) -> Vec<(String, Vec<usize>, &[f64])> {
    let shape = model.shape();
    let mut out = Vec::new();
    for s in Space::ALL {
        let h = model.heads.head(s);
        out.push((
            format!("{s}.weight"),
            vec![shape.embed_dim, shape.input_dim],
            &h.weight[..],
        ));
        out.push((format!("{s}.bias"), vec![shape.embed_dim], &h.bias[..]));
    }
    for s in Space::ALL {
        out.push((
            format!("{s}.arcface"),
            vec![shape.classes, shape.embed_dim],
            &model.arcface(s).weight[..],
        ));
    }
    out
}

/// Writes the model; parameters are rounded to `f32`.
pub fn save_checkpoint(model: &ReidModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let shape = model.shape();
    let mut entries = Vec::new();
    for (name, dims, data) in tensors_of(model) {
        let file = format!("{name}.f32");
        let path = dir.join(&file);
        fs::write(&path, encode_f32(data)).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name,
            file,
            shape: dims,
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        input_dim: shape.input_dim,
        embed_dim: shape.embed_dim,
        classes: shape.classes,
        spaces: Space::ALL.to_vec(),
        s_arc: shape.arc_scale,
        m_arc: shape.arc_margin,
        use_bias: shape.use_bias,
        tensors: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatMismatch(format!(
            "checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.spaces != Space::ALL {
        return Err(Error::FormatMismatch(format!(
            "checkpoint spaces {:?} do not match global/front/side/rear",
            manifest.spaces
        )));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ReidModel> {
    let m = load_manifest(dir)?;
    let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let entry = m
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MalformedFile(format!("checkpoint lacks tensor {name}")))?;
        if entry.shape != shape {
            return Err(Error::FormatMismatch(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let data = decode_f32(&bytes)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::MalformedFile(format!(
                "{}: {} floats, expected {expected}",
                path.display(),
                data.len()
            )));
        }
        Ok(data)
    };
    let (big_d, d, k) = (m.input_dim, m.embed_dim, m.classes);
    let mut heads = Vec::with_capacity(4);
    for s in Space::ALL {
        heads.push(LinearHead {
            weight: read(&format!("{s}.weight"), &[d, big_d])?,
            bias: read(&format!("{s}.bias"), &[d])?,
        });
    }
    let heads = HeadParameters::new(big_d, d, m.use_bias, heads.try_into().expect("four spaces"))?;
    let mut arcface = Vec::with_capacity(4);
    for s in Space::ALL {
        let w = read(&format!("{s}.arcface"), &[k, d])?;
        arcface.push(ArcFaceHead::new(k, d, w, m.s_arc, m.m_arc)?);
    }
    Ok(ReidModel {
        heads,
        arcface: arcface.try_into().expect("four spaces"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{init_heads, ModelShape};

    fn quantized(model: &ReidModel) -> ReidModel {
        let mut m = model.clone();
        for s in Space::ALL {
            let h = m.heads.head_mut(s);
            h.weight.iter_mut().for_each(|x| *x = *x as f32 as f64);
            h.bias.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        for a in m.arcface.iter_mut() {
            a.weight.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        m
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_heads(3, ModelShape::new(6, 4, 3)).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, quantized(&model));
        let bytes = fs::read(dir.path().join("side.arcface.f32")).unwrap();
        assert_eq!(bytes.len(), 4 * 3 * 4);
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_heads(3, ModelShape::new(2, 2, 2)).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::FormatMismatch(_))));
    }

    #[test]
    fn truncated_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let model = init_heads(3, ModelShape::new(2, 2, 2)).unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        fs::write(dir.path().join("front.bias.f32"), [0u8; 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MalformedFile(_))));
    }
}
