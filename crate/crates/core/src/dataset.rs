//! Dataset manifests and the `VCFE` backbone-embedding file.
//!
//! Manifest: UTF-8 text, one `image_id,identity,embedding_index,mask_stem`
//! record per line. Blank lines and lines starting with `#` are ignored.
//!
//! Embeddings: magic `VCFE`, `u16` version 1, `u32` count N, `u32` dim D,
//! then N×D little-endian `f32` row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{load_area_ratios, AreaRatios};
use crate::training::TrainingSample;

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"VCFE";
pub const EMBEDDINGS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_id: String,
    pub identity: u32,
    pub embedding_index: usize,
    pub mask_stem: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::MalformedFile(format!("manifest line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        let [image_id, identity, index, stem] = fields.as_slice() else {
            return Err(bad("expected 4 comma-separated fields"));
        };
        if image_id.is_empty() || stem.is_empty() {
            return Err(bad("empty image id or mask stem"));
        }
        out.push(ManifestRecord {
            image_id: image_id.to_string(),
            identity: identity.parse().map_err(|_| bad("identity is not an integer"))?,
            embedding_index: index.parse().map_err(|_| bad("embedding index is not an integer"))?,
            mask_stem: stem.to_string(),
        });
    }
    Ok(out)
}

pub fn format_manifest(records: &[ManifestRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{},{},{},{}\n", r.image_id, r.identity, r.embedding_index, r.mask_stem))
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::MalformedFile(m) => Error::MalformedFile(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}

/// Row-major matrix of backbone embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            Error::check_dim(dim, r.len())?;
            data.extend(r.iter().map(|&x| x as f32));
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> Option<Vec<f64>> {
        (i < self.len()).then(|| {
            self.data[i * self.dim..(i + 1) * self.dim]
                .iter()
                .map(|&x| x as f64)
                .collect()
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * self.data.len());
        out.extend_from_slice(EMBEDDINGS_MAGIC);
        out.extend_from_slice(&EMBEDDINGS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != EMBEDDINGS_MAGIC {
            return Err(Error::MalformedFile("bad embeddings magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EMBEDDINGS_VERSION {
            return Err(Error::FormatMismatch(format!(
                "embeddings version {version} (expected {EMBEDDINGS_VERSION})"
            )));
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if dim == 0 || body.len() != count * dim * 4 {
            return Err(Error::MalformedFile(format!(
                "embeddings body has {} bytes, expected {count}x{dim} f32",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Joins manifest records with their embeddings and mask-derived ratios.
pub fn load_samples(
    records: &[ManifestRecord],
    embeddings: &EmbeddingMatrix,
    masks_dir: &Path,
) -> Result<Vec<TrainingSample>> {
    records
        .iter()
        .map(|r| {
            let embedding = embeddings.row(r.embedding_index).ok_or_else(|| {
                Error::MalformedFile(format!(
                    "{}: embedding index {} out of range ({} rows)",
                    r.image_id,
                    r.embedding_index,
                    embeddings.len()
                ))
            })?;
            let area_ratios: AreaRatios = load_area_ratios(masks_dir, &r.mask_stem)?;
            Ok(TrainingSample {
                image_id: r.image_id.clone(),
                identity: r.identity,
                embedding,
                area_ratios,
            })
        })
        .collect()
}
