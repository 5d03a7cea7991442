//! Semantic sidecars: per-Gaussian category labels (JSON) and embedding
//! matrices (raw little-endian `f32` with a 16-byte header).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scene::Scene;

/// Leading bytes of an embedding matrix file.
pub const EMBEDDING_MAGIC: [u8; 4] = *b"GEMB";
const HEADER_LEN: usize = 16;

/// Row-major `count x dim` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "embedding payload of {} floats is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows scaled to unit L2 norm; a zero row is an error naming its index.
    pub fn normalized(&self) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.rows() {
            let row = self.row(i);
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Validation(format!(
                    "embedding row {i} has zero or non-finite norm and cannot be normalized"
                )));
            }
            data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
        }
        Ok(EmbeddingMatrix { dim: self.dim, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::Format("embedding matrix: bad magic".into()));
        }
        let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("embedding matrix: header overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "embedding matrix: header declares {count}x{dim} but payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if dim == 0 && count > 0 {
            return Err(Error::Format("embedding matrix: zero dimension".into()));
        }
        Ok(EmbeddingMatrix { dim: dim.max(1), data })
    }
}

pub fn read_embedding_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn write_embedding_matrix(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum CategoryFile {
    Labels(Vec<Option<String>>),
    Declared {
        #[serde(default)]
        mode: Option<String>,
        #[serde(default)]
        vocab: Option<Vec<String>>,
        labels: Vec<Option<String>>,
    },
}

/// Parsed category sidecar. A declared vocabulary is closed: labels outside it are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySidecar {
    pub vocab: Option<Vec<String>>,
    pub labels: Vec<Option<String>>,
}

impl CategorySidecar {
    pub fn parse(json: &str) -> Result<Self> {
        match serde_json::from_str::<CategoryFile>(json)? {
            CategoryFile::Labels(labels) => Ok(CategorySidecar { vocab: None, labels }),
            CategoryFile::Declared { mode, vocab, labels } => {
                if let Some(m) = mode.as_deref() {
                    if m != "category" {
                        return Err(Error::Format(format!(
                            "JSON sidecar declares mode '{m}'; embedding sidecars use the binary matrix format"
                        )));
                    }
                }
                Ok(CategorySidecar { vocab, labels })
            }
        }
    }
}

/// A sidecar of either kind, detected from the file contents.
#[derive(Debug, Clone)]
pub enum Semantics {
    Category(CategorySidecar),
    Embedding(EmbeddingMatrix),
}

impl Semantics {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(&EMBEDDING_MAGIC) {
            return Ok(Semantics::Embedding(EmbeddingMatrix::from_bytes(&bytes)?));
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format("sidecar is neither an embedding matrix nor UTF-8 JSON".into()))?;
        Ok(Semantics::Category(CategorySidecar::parse(&text)?))
    }

    pub fn mode(&self) -> &'static str {
        match self {
            Semantics::Category(_) => "category",
            Semantics::Embedding(_) => "embedding",
        }
    }
}

/// Reads a sidecar and returns a new scene carrying its labels or embeddings.
pub fn attach_semantics(scene: &Scene, sidecar_path: &Path) -> Result<Scene> {
    attach(scene, Semantics::read(sidecar_path)?)
}

pub fn attach(scene: &Scene, semantics: Semantics) -> Result<Scene> {
    match semantics {
        Semantics::Category(c) => attach_categories(scene, &c),
        Semantics::Embedding(m) => attach_embeddings(scene, &m),
    }
}

pub fn attach_categories(scene: &Scene, sidecar: &CategorySidecar) -> Result<Scene> {
    if sidecar.labels.len() != scene.len() {
        return Err(Error::Validation(format!(
            "category sidecar has {} entries for {} gaussians",
            sidecar.labels.len(),
            scene.len()
        )));
    }
    let mut vocab = scene.vocab().to_vec();
    if let Some(declared) = &sidecar.vocab {
        for v in declared {
            if !vocab.contains(v) {
                vocab.push(v.clone());
            }
        }
        let unknown: BTreeSet<&str> = sidecar
            .labels
            .iter()
            .flatten()
            .filter(|l| !vocab.contains(l))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Validation(format!(
                "unknown categories: {}",
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
    } else {
        for l in sidecar.labels.iter().flatten() {
            if !vocab.contains(l) {
                vocab.push(l.clone());
            }
        }
    }
    let (mut gaussians, cameras, _) = scene.clone().into_parts();
    for (g, label) in gaussians.iter_mut().zip(&sidecar.labels) {
        g.category = label.as_ref().map(|l| vocab.iter().position(|v| v == l).unwrap());
    }
    Scene::new(gaussians, cameras, vocab)
}

pub fn attach_embeddings(scene: &Scene, m: &EmbeddingMatrix) -> Result<Scene> {
    if m.rows() != scene.len() {
        return Err(Error::Validation(format!(
            "embedding sidecar has {} rows for {} gaussians",
            m.rows(),
            scene.len()
        )));
    }
    let unit = m.normalized()?;
    let (mut gaussians, cameras, vocab) = scene.clone().into_parts();
    for (i, g) in gaussians.iter_mut().enumerate() {
        g.embedding = Some(unit.row(i).to_vec());
    }
    Scene::new(gaussians, cameras, vocab)
}
