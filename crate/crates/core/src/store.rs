// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk contrastive activation format.
//!
//! One directory per (model, concept) pair:
//!
//! - `manifest.json`: UTF-8 JSON, see [`Manifest`]. Unknown fields are rejected.
//! - `pos.bin` / `neg.bin`: raw little-endian `f32`, no header, layer-major.
//!   Element `(layer, pair, dim)` lives at byte offset
//!   `((layer * n_pairs + pair) * hidden_dim + dim) * 4`.
//!
//! Integrity is checked by comparing blob lengths against the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed manifest file name inside every activation directory.
pub const MANIFEST_NAME: &str = "manifest.json";
/// Current format version written by [`write_activation_set`].
pub const FORMAT_VERSION: &str = "1";

const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: String,
        expected: u64,
        actual: u64,
    },
    #[error("bad manifest field `{field}`: {reason}")]
    BadField { field: String, reason: String },
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("non-finite value in {tensor} at layer {layer}, pair {pair}, dim {dim}")]
    NonFinite {
        tensor: &'static str,
        layer: usize,
        pair: usize,
        dim: usize,
    },
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    fn bad(field: &str, reason: impl Into<String>) -> Self {
        StoreError::BadField {
            field: field.to_owned(),
            reason: reason.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "layer_major")]
    LayerMajor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobFiles {
    pub pos: String,
    pub neg: String,
}

impl Default for BlobFiles {
    fn default() -> Self {
        BlobFiles {
            pos: "pos.bin".to_owned(),
            neg: "neg.bin".to_owned(),
        }
    }
}

/// Metadata describing one activation directory.
///
/// `annotations` is free-form provenance (extraction precision, BOS handling,
/// patch lists for patched dumps). It is the only open-ended field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub model_id: String,
    pub concept: String,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_pairs: usize,
    pub dtype: Dtype,
    pub layout: Layout,
    pub files: BlobFiles,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub annotations: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(model_id: &str, concept: &str, n_layers: usize, n_pairs: usize, hidden_dim: usize) -> Self {
        Manifest {
            format_version: FORMAT_VERSION.to_owned(),
            model_id: model_id.to_owned(),
            concept: concept.to_owned(),
            n_layers,
            hidden_dim,
            n_pairs,
            dtype: Dtype::F32Le,
            layout: Layout::LayerMajor,
            files: BlobFiles::default(),
            annotations: BTreeMap::new(),
        }
    }

    /// Parses a manifest, reporting out-of-range dimensions and unknown
    /// enum values as [`StoreError::BadField`] rather than generic JSON errors.
    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(obj) = value.as_object() {
            for field in ["n_layers", "hidden_dim", "n_pairs"] {
                if let Some(v) = obj.get(field) {
                    match v.as_i64() {
                        Some(n) if n < 1 => {
                            return Err(StoreError::bad(field, format!("must be positive, got {n}")))
                        }
                        None if !v.is_u64() => {
                            return Err(StoreError::bad(field, "must be an integer"))
                        }
                        _ => {}
                    }
                }
            }
            if let Some(v) = obj.get("dtype") {
                if v.as_str() != Some("f32le") {
                    return Err(StoreError::bad("dtype", format!("unsupported dtype {v}")));
                }
            }
            if let Some(v) = obj.get("layout") {
                if v.as_str() != Some("layer_major") {
                    return Err(StoreError::bad("layout", format!("unsupported layout {v}")));
                }
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Number of `f32` elements in each blob.
    pub fn element_count(&self) -> usize {
        self.n_layers * self.n_pairs * self.hidden_dim
    }

    pub fn expected_blob_bytes(&self) -> u64 {
        self.element_count() as u64 * BYTES_PER_ELEMENT
    }

    /// Checks every invariant that does not need the filesystem.
    pub fn check_fields(&self) -> Result<(), StoreError> {
        if self.n_layers < 2 {
            return Err(StoreError::bad("n_layers", format!("need at least 2 layers, got {}", self.n_layers)));
        }
        if self.hidden_dim < 1 {
            return Err(StoreError::bad("hidden_dim", "must be positive"));
        }
        if self.n_pairs < 2 {
            return Err(StoreError::bad(
                "n_pairs",
                format!("within-class variance needs at least 2 pairs, got {}", self.n_pairs),
            ));
        }
        check_identifier("model_id", &self.model_id)?;
        check_identifier("concept", &self.concept)?;
        check_relative("files.pos", &self.files.pos)?;
        check_relative("files.neg", &self.files.neg)?;
        if self.files.pos == self.files.neg {
            return Err(StoreError::bad("files", "pos and neg must be distinct files"));
        }
        Ok(())
    }
}

fn check_identifier(field: &str, value: &str) -> Result<(), StoreError> {
    if value.is_empty() {
        return Err(StoreError::bad(field, "must be non-empty"));
    }
    if value.contains('/') || value.contains('\\') {
        return Err(StoreError::bad(field, format!("contains a path separator: {value:?}")));
    }
    Ok(())
}

fn check_relative(field: &str, value: &str) -> Result<(), StoreError> {
    let path = Path::new(value);
    if value.is_empty() || path.is_absolute() {
        return Err(StoreError::bad(field, format!("must be a relative path, got {value:?}")));
    }
    if path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(StoreError::bad(field, format!("must stay inside the directory: {value:?}")));
    }
    Ok(())
}

/// Validates a parsed manifest against the sizes of the blobs it references.
///
/// `file_sizes` maps the manifest's relative blob paths to byte lengths; an
/// absent key means the file does not exist.
pub fn validate_manifest(manifest: &Manifest, file_sizes: &BTreeMap<String, u64>) -> Result<(), StoreError> {
    manifest.check_fields()?;
    let expected = manifest.expected_blob_bytes();
    for path in [&manifest.files.pos, &manifest.files.neg] {
        let actual = *file_sizes
            .get(path)
            .ok_or_else(|| StoreError::MissingFile(path.clone()))?;
        if actual != expected {
            return Err(StoreError::SizeMismatch {
                path: path.clone(),
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// Dense `[layer][pair][dim]` tensor stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    n_layers: usize,
    n_pairs: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(n_layers: usize, n_pairs: usize, dim: usize) -> Self {
        Tensor3 {
            n_layers,
            n_pairs,
            dim,
            data: vec![0.0; n_layers * n_pairs * dim],
        }
    }

    pub fn from_vec(n_layers: usize, n_pairs: usize, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if data.len() != n_layers * n_pairs * dim {
            return Err(StoreError::ShapeMismatch(format!(
                "{} elements for shape [{n_layers}][{n_pairs}][{dim}]",
                data.len()
            )));
        }
        Ok(Tensor3 {
            n_layers,
            n_pairs,
            dim,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_layers, self.n_pairs, self.dim)
    }

    /// Element index of `(layer, pair, dim)`; multiply by 4 for the byte offset.
    #[inline]
    pub fn offset(&self, layer: usize, pair: usize, dim: usize) -> usize {
        (layer * self.n_pairs + pair) * self.dim + dim
    }

    #[inline]
    pub fn get(&self, layer: usize, pair: usize, dim: usize) -> f32 {
        self.data[self.offset(layer, pair, dim)]
    }

    #[inline]
    pub fn set(&mut self, layer: usize, pair: usize, dim: usize, value: f32) {
        let idx = self.offset(layer, pair, dim);
        self.data[idx] = value;
    }

    /// All pairs at one layer, `n_pairs * dim` values, one row per pair.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let stride = self.n_pairs * self.dim;
        &self.data[layer * stride..(layer + 1) * stride]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f32] {
        let stride = self.n_pairs * self.dim;
        &mut self.data[layer * stride..(layer + 1) * stride]
    }

    pub fn row(&self, layer: usize, pair: usize) -> &[f32] {
        let start = self.offset(layer, pair, 0);
        &self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn first_non_finite(&self) -> Option<(usize, usize, usize)> {
        let idx = self.data.iter().position(|v| !v.is_finite())?;
        let dim = idx % self.dim;
        let pair = (idx / self.dim) % self.n_pairs;
        let layer = idx / (self.dim * self.n_pairs);
        Some((layer, pair, dim))
    }

    pub(crate) fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_le_bytes(n_layers: usize, n_pairs: usize, dim: usize, bytes: &[u8]) -> Self {
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor3 {
            n_layers,
            n_pairs,
            dim,
            data,
        }
    }
}

/// Positive and negative last-token activations for one (model, concept).
///
/// Immutable once constructed; construction enforces shape agreement with
/// the manifest and finiteness of every element.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    manifest: Manifest,
    pos: Tensor3,
    neg: Tensor3,
}

impl ActivationSet {
    pub fn new(manifest: Manifest, pos: Tensor3, neg: Tensor3) -> Result<Self, StoreError> {
        manifest.check_fields()?;
        let want = (manifest.n_layers, manifest.n_pairs, manifest.hidden_dim);
        if pos.shape() != want || neg.shape() != want {
            return Err(StoreError::ShapeMismatch(format!(
                "manifest {want:?}, pos {:?}, neg {:?}",
                pos.shape(),
                neg.shape()
            )));
        }
        for (name, t) in [("pos", &pos), ("neg", &neg)] {
            if let Some((layer, pair, dim)) = t.first_non_finite() {
                return Err(StoreError::NonFinite {
                    tensor: name,
                    layer,
                    pair,
                    dim,
                });
            }
        }
        Ok(ActivationSet { manifest, pos, neg })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn pos(&self) -> &Tensor3 {
        &self.pos
    }

    pub fn neg(&self) -> &Tensor3 {
        &self.neg
    }

    pub fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }

    pub fn n_pairs(&self) -> usize {
        self.manifest.n_pairs
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    pub fn model_id(&self) -> &str {
        &self.manifest.model_id
    }

    pub fn concept(&self) -> &str {
        &self.manifest.concept
    }

    /// Returns a copy carrying a different manifest (same tensors).
    pub fn with_manifest(&self, manifest: Manifest) -> Result<Self, StoreError> {
        ActivationSet::new(manifest, self.pos.clone(), self.neg.clone())
    }

    pub fn into_parts(self) -> (Manifest, Tensor3, Tensor3) {
        (self.manifest, self.pos, self.neg)
    }
}

fn file_len(path: &Path) -> Result<Option<u64>, StoreError> {
    match fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(Some(m.len())),
        Ok(_) => Ok(None),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(StoreError::io(path, e)),
    }
}

/// Reads and validates the manifest of `dir` without loading the blobs.
pub fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_NAME);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StoreError::MissingFile(path.display().to_string()))
        }
        Err(e) => return Err(StoreError::io(&path, e)),
    };
    let manifest = Manifest::from_json(&text)?;
    manifest.check_fields()?;
    let mut sizes = BTreeMap::new();
    for rel in [&manifest.files.pos, &manifest.files.neg] {
        if let Some(len) = file_len(&dir.join(rel))? {
            sizes.insert(rel.clone(), len);
        }
    }
    validate_manifest(&manifest, &sizes)?;
    Ok(manifest)
}

pub fn load_activation_set(dir: &Path) -> Result<ActivationSet, StoreError> {
    let manifest = read_manifest(dir)?;
    let (l, k, d) = (manifest.n_layers, manifest.n_pairs, manifest.hidden_dim);
    let read = |rel: &str| -> Result<Tensor3, StoreError> {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        if bytes.len() as u64 != manifest.expected_blob_bytes() {
            // the file changed between validation and read
            return Err(StoreError::SizeMismatch {
                path: rel.to_owned(),
                expected: manifest.expected_blob_bytes(),
                actual: bytes.len() as u64,
            });
        }
        Ok(Tensor3::from_le_bytes(l, k, d, &bytes))
    };
    let pos = read(&manifest.files.pos)?;
    let neg = read(&manifest.files.neg)?;
    ActivationSet::new(manifest, pos, neg)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        StoreError::io(path, e)
    })
}

pub fn write_activation_set(set: &ActivationSet, dir: &Path) -> Result<(), StoreError> {
    // ActivationSet can only be built through `new`, which already enforces
    // shape and finiteness; recheck the manifest fields in case of drift.
    set.manifest.check_fields()?;
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    write_atomic(&dir.join(&set.manifest.files.pos), &set.pos.to_le_bytes())?;
    write_atomic(&dir.join(&set.manifest.files.neg), &set.neg.to_le_bytes())?;
    write_atomic(&dir.join(MANIFEST_NAME), set.manifest.to_json().as_bytes())?;
    Ok(())
}
