//! `RAVLEMB1` embedding files with line-delimited JSON sidecars.
//!
//! Layout: 8-byte magic, `u32` row count, `u32` dimension (both little
//! endian), then `rows * dim` little-endian `f32` values, row-major.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{RawDataset, RawImage, RawRegion};
use crate::embedding::Embedding;
use crate::error::{RavlError, Result};
use crate::mitigate::Encoder;
use crate::zeroshot::LabelEmbeddings;

pub const MAGIC: &[u8; 8] = b"RAVLEMB1";
const HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(RavlError::DimMismatch { expected: dim, got: r.len() });
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Ok(Self { rows: rows.len(), dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: &str| RavlError::Corrupt { offset: offset as u64, reason: reason.into() };
        if bytes.len() < MAGIC.len() {
            return Err(corrupt(bytes.len(), "truncated magic"));
        }
        if let Some(i) = (0..MAGIC.len()).find(|&i| bytes[i] != MAGIC[i]) {
            return Err(corrupt(i, "bad magic"));
        }
        if bytes.len() < HEADER {
            return Err(corrupt(bytes.len(), "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (rows, dim) = (u32_at(8), u32_at(12));
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER))
            .ok_or_else(|| corrupt(8, "header size overflows"))?;
        if bytes.len() != expected {
            let at = bytes.len().min(expected);
            return Err(corrupt(
                at,
                &format!("body holds {} bytes, header implies {}", bytes.len() - HEADER, expected - HEADER),
            ));
        }
        let data =
            bytes[HEADER..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { rows, dim, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Image,
    Region,
    Label,
}

/// One sidecar line describing the matching matrix row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: String,
    pub kind: RowKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Writes via a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => RavlError::MissingArtifact(path.display().to_string()),
        _ => e.into(),
    })
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    atomic_write(path, &m.to_bytes())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    Matrix::from_bytes(&read_artifact(path)?)
}

pub fn sidecar_bytes(meta: &[RowMeta]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for m in meta {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<Vec<RowMeta>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let text = line.strip_suffix(b"\n").unwrap_or(line);
        if !text.iter().all(u8::is_ascii_whitespace) {
            let meta = serde_json::from_slice(text)
                .map_err(|e| RavlError::Corrupt { offset: offset as u64, reason: format!("sidecar: {e}") })?;
            out.push(meta);
        }
        offset += line.len();
    }
    Ok(out)
}

/// Sidecar path for a matrix path: `x.emb` -> `x.jsonl`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

/// Writes a matrix and its sidecar.
pub fn write_embedding_file(path: &Path, m: &Matrix, meta: &[RowMeta]) -> Result<()> {
    if meta.len() != m.rows {
        return Err(RavlError::DimMismatch { expected: m.rows, got: meta.len() });
    }
    write_matrix(path, m)?;
    atomic_write(&sidecar_path(path), &sidecar_bytes(meta)?)
}

pub fn read_embedding_file(path: &Path) -> Result<(Matrix, Vec<RowMeta>)> {
    let m = read_matrix(path)?;
    let side = sidecar_path(path);
    let bytes = read_artifact(&side)?;
    let meta = parse_sidecar(&bytes)?;
    if meta.len() != m.rows {
        return Err(RavlError::Corrupt {
            offset: bytes.len() as u64,
            reason: format!("{} has {} records for {} rows", side.display(), meta.len(), m.rows),
        });
    }
    Ok((m, meta))
}

/// Images first, then regions.
pub fn write_dataset(path: &Path, ds: &RawDataset, label_names: &[String]) -> Result<()> {
    let mut rows = Vec::with_capacity(ds.images.len() + ds.regions.len());
    let mut meta = Vec::with_capacity(rows.capacity());
    for img in &ds.images {
        rows.push(img.features.clone());
        meta.push(RowMeta {
            id: img.id.clone(),
            kind: RowKind::Image,
            image_id: None,
            bbox: None,
            concept: None,
            class_label: Some(label_names[img.label].clone()),
            caption: Some(img.caption.clone()),
        });
    }
    for r in &ds.regions {
        rows.push(r.features.clone());
        meta.push(RowMeta {
            id: r.id.clone(),
            kind: RowKind::Region,
            image_id: Some(ds.images[r.image].id.clone()),
            bbox: Some(r.bbox),
            concept: r.concept.clone(),
            class_label: None,
            caption: None,
        });
    }
    write_embedding_file(path, &Matrix::from_rows(&rows)?, &meta)
}

pub fn read_dataset(path: &Path, label_names: &[String]) -> Result<RawDataset> {
    let (m, meta) = read_embedding_file(path)?;
    let bad = |reason: String| RavlError::Corrupt { offset: 0, reason };
    let mut ds = RawDataset::default();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, row) in meta.iter().enumerate().filter(|(_, r)| r.kind == RowKind::Image) {
        let name = row.class_label.as_deref().ok_or_else(|| bad(format!("image {} has no class label", row.id)))?;
        let label = label_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| bad(format!("image {} has unknown class label {name:?}", row.id)))?;
        index.insert(row.id.clone(), ds.images.len());
        ds.images.push(RawImage {
            id: row.id.clone(),
            label,
            caption: row.caption.clone().unwrap_or_default(),
            features: m.row_f64(i),
            regions: Vec::new(),
        });
    }
    for (i, row) in meta.iter().enumerate().filter(|(_, r)| r.kind == RowKind::Region) {
        let parent = row.image_id.as_deref().ok_or_else(|| bad(format!("region {} has no image id", row.id)))?;
        let image =
            *index.get(parent).ok_or_else(|| bad(format!("region {} points at unknown image {parent}", row.id)))?;
        ds.images[image].regions.push(ds.regions.len());
        ds.regions.push(RawRegion {
            id: row.id.clone(),
            image,
            bbox: row.bbox.unwrap_or([0.0; 4]),
            features: m.row_f64(i),
            concept: row.concept.clone(),
        });
    }
    ds.validate()?;
    Ok(ds)
}

pub fn write_labels(path: &Path, labels: &LabelEmbeddings) -> Result<()> {
    let rows: Vec<Vec<f64>> = labels.embeddings().iter().map(|e| e.0.clone()).collect();
    let meta: Vec<RowMeta> = labels
        .names()
        .iter()
        .map(|n| RowMeta {
            id: n.clone(),
            kind: RowKind::Label,
            image_id: None,
            bbox: None,
            concept: None,
            class_label: Some(n.clone()),
            caption: None,
        })
        .collect();
    write_embedding_file(path, &Matrix::from_rows(&rows)?, &meta)
}

pub fn read_labels(path: &Path) -> Result<LabelEmbeddings> {
    let (m, meta) = read_embedding_file(path)?;
    let names = meta.iter().map(|r| r.class_label.clone().unwrap_or_else(|| r.id.clone())).collect();
    LabelEmbeddings::new(names, (0..m.rows).map(|i| Embedding(m.row_f64(i))).collect())
}

/// Encoder checkpoint: one row per raw input dimension.
pub fn write_encoder(path: &Path, encoder: &Encoder) -> Result<()> {
    let m = Matrix {
        rows: encoder.raw_dim,
        dim: encoder.embed_dim,
        data: encoder.weights.iter().map(|&w| w as f32).collect(),
    };
    write_matrix(path, &m)
}

pub fn read_encoder(path: &Path) -> Result<Encoder> {
    let m = read_matrix(path)?;
    Encoder::from_weights(m.rows, m.dim, m.data.iter().map(|&x| f64::from(x)).collect())
}
