//! Single-file tensor bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STRATGEO"            8-byte magic
//! version: u32          currently 1
//! manifest_len: u64     byte length of the JSON manifest
//! manifest              UTF-8 JSON: {"arrays": [...], "metadata": {...}}
//! payload               raw array bytes, row-major, little-endian
//! ```
//!
//! Each array descriptor carries `name`, `dtype` (`"f32"`, `"i64"` or
//! `"u8"`), `shape`, and `byte_offset`/`byte_length` relative to the start
//! of the payload. Arrays appended through the builder methods are laid out
//! back to back without padding.
//!
//! [`load_bundle`] sizes its payload buffer from the file length and reads
//! the manifest and payload exactly once, so peak allocation is bounded by
//! the manifest plus payload size.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{ActivationTensor, Tensor3, TensorError};

pub const MAGIC: &[u8; 8] = b"STRATGEO";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("file does not start with the STRATGEO magic")]
    MagicMismatch,
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("array {name:?} spans bytes {start}..{end} but payload has {payload_len}")]
    PayloadBounds { name: String, start: u64, end: u64, payload_len: u64 },
    #[error("unsupported dtype {0:?}")]
    DtypeUnsupported(String),
    #[error("bundle invariant violated: {0}")]
    InvariantViolation(String),
    #[error("no array named {0:?}")]
    MissingArray(String),
    #[error("array {name:?} has dtype {found}, expected {expected}")]
    WrongDtype { name: String, expected: Dtype, found: Dtype },
    #[error("array {name:?} has shape {shape:?}: {reason}")]
    BadShape { name: String, shape: Vec<usize>, reason: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I64,
    U8,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn parse(s: &str) -> Result<Self, BundleError> {
        match s {
            "f32" => Ok(Dtype::F32),
            "i64" => Ok(Dtype::I64),
            "u8" => Ok(Dtype::U8),
            other => Err(BundleError::DtypeUnsupported(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::I64 => "i64",
            Dtype::U8 => "u8",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArrayDescriptor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl ArrayDescriptor {
    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

// dtype stays a string until validation so unknown dtypes get their own error
#[derive(Deserialize)]
struct RawDescriptor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Deserialize)]
struct RawManifest {
    arrays: Vec<RawDescriptor>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    arrays: &'a [ArrayDescriptor],
    metadata: &'a BTreeMap<String, String>,
}

/// Named arrays plus string metadata, validated on construction and load.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    arrays: Vec<ArrayDescriptor>,
    payload: Vec<u8>,
    metadata: BTreeMap<String, String>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assembles a bundle from raw parts and checks every invariant.
    pub fn from_parts(
        arrays: Vec<ArrayDescriptor>,
        payload: Vec<u8>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, BundleError> {
        let bundle = Self { arrays, payload, metadata };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn arrays(&self) -> &[ArrayDescriptor] {
        &self.arrays
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn descriptor(&self, name: &str) -> Option<&ArrayDescriptor> {
        self.arrays.iter().find(|d| d.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.descriptor(name).is_some()
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let mut names = HashSet::new();
        let payload_len = self.payload.len() as u64;
        for d in &self.arrays {
            if !names.insert(d.name.as_str()) {
                return Err(BundleError::InvariantViolation(format!("duplicate array name {:?}", d.name)));
            }
            let end = d
                .byte_offset
                .checked_add(d.byte_length)
                .ok_or_else(|| BundleError::InvariantViolation(format!("array {:?} offset overflows", d.name)))?;
            if end > payload_len {
                return Err(BundleError::PayloadBounds {
                    name: d.name.clone(),
                    start: d.byte_offset,
                    end,
                    payload_len,
                });
            }
            let expected = (d.n_elements() * d.dtype.width()) as u64;
            if d.byte_length != expected {
                return Err(BundleError::InvariantViolation(format!(
                    "array {:?} declares {} bytes but shape {:?} of {} needs {}",
                    d.name, d.byte_length, d.shape, d.dtype, expected
                )));
            }
        }
        let mut spans: Vec<(u64, u64, &str)> = self
            .arrays
            .iter()
            .filter(|d| d.byte_length > 0)
            .map(|d| (d.byte_offset, d.byte_offset + d.byte_length, d.name.as_str()))
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(BundleError::InvariantViolation(format!("arrays {:?} and {:?} overlap", w[0].2, w[1].2)));
            }
        }
        Ok(())
    }

    fn push_raw(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) -> Result<(), BundleError> {
        if self.contains(name) {
            return Err(BundleError::InvariantViolation(format!("duplicate array name {name:?}")));
        }
        let n: usize = shape.iter().product();
        if bytes.len() != n * dtype.width() {
            return Err(BundleError::InvariantViolation(format!(
                "array {name:?}: {} bytes for shape {shape:?}",
                bytes.len()
            )));
        }
        self.arrays.push(ArrayDescriptor {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            byte_offset: self.payload.len() as u64,
            byte_length: bytes.len() as u64,
        });
        self.payload.extend_from_slice(&bytes);
        Ok(())
    }

    pub fn insert_f32(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<(), BundleError> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_raw(name, Dtype::F32, shape, bytes)
    }

    pub fn insert_i64(&mut self, name: &str, shape: &[usize], values: &[i64]) -> Result<(), BundleError> {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_raw(name, Dtype::I64, shape, bytes)
    }

    pub fn insert_u8(&mut self, name: &str, shape: &[usize], values: &[u8]) -> Result<(), BundleError> {
        self.push_raw(name, Dtype::U8, shape, values.to_vec())
    }

    fn raw(&self, name: &str, dtype: Dtype) -> Result<(&ArrayDescriptor, &[u8]), BundleError> {
        let d = self.descriptor(name).ok_or_else(|| BundleError::MissingArray(name.to_string()))?;
        if d.dtype != dtype {
            return Err(BundleError::WrongDtype { name: name.to_string(), expected: dtype, found: d.dtype });
        }
        let start = d.byte_offset as usize;
        Ok((d, &self.payload[start..start + d.byte_length as usize]))
    }

    pub fn f32_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>), BundleError> {
        let (d, bytes) = self.raw(name, Dtype::F32)?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok((d.shape.clone(), values))
    }

    pub fn i64_array(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>), BundleError> {
        let (d, bytes) = self.raw(name, Dtype::I64)?;
        let values = bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        Ok((d.shape.clone(), values))
    }

    pub fn u8_array(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>), BundleError> {
        let (d, bytes) = self.raw(name, Dtype::U8)?;
        Ok((d.shape.clone(), bytes.to_vec()))
    }

    /// Reads a 3-D f32 array as a tensor.
    pub fn tensor3(&self, name: &str) -> Result<Tensor3<f32>, BundleError> {
        let (shape, values) = self.f32_array(name)?;
        if shape.len() != 3 {
            return Err(BundleError::BadShape { name: name.to_string(), shape, reason: "expected 3 dimensions" });
        }
        Ok(Tensor3::from_vec([shape[0], shape[1], shape[2]], values)?)
    }

    /// Builds an [`ActivationTensor`] from `data_name` and, when present, the
    /// u8 mask `mask_name` (nonzero = kept). A missing mask keeps every token.
    pub fn activation_tensor(&self, data_name: &str, mask_name: &str) -> Result<ActivationTensor, BundleError> {
        let data = self.tensor3(data_name)?;
        if !self.contains(mask_name) {
            return Ok(ActivationTensor::unmasked(data));
        }
        let (shape, mask) = self.u8_array(mask_name)?;
        let [b, s, _] = data.shape();
        if shape != [b, s] {
            return Err(BundleError::BadShape {
                name: mask_name.to_string(),
                shape,
                reason: "mask must match the leading two data dimensions",
            });
        }
        Ok(ActivationTensor::new(data, mask.into_iter().map(|m| m != 0).collect())?)
    }

    /// Serialized manifest bytes, exactly as written to disk.
    pub fn manifest_json(&self) -> Vec<u8> {
        serde_json::to_vec(&ManifestOut { arrays: &self.arrays, metadata: &self.metadata })
            .expect("manifest serialization cannot fail")
    }

    /// Full on-disk encoding.
    pub fn to_bytes(&self) -> Result<Vec<u8>, BundleError> {
        self.validate()?;
        let manifest = self.manifest_json();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

fn parse_manifest(bytes: &[u8]) -> Result<(Vec<ArrayDescriptor>, BTreeMap<String, String>), BundleError> {
    let raw: RawManifest = serde_json::from_slice(bytes).map_err(|e| BundleError::ManifestParse(e.to_string()))?;
    let arrays = raw
        .arrays
        .into_iter()
        .map(|r| {
            Ok(ArrayDescriptor {
                dtype: Dtype::parse(&r.dtype)?,
                name: r.name,
                shape: r.shape,
                byte_offset: r.byte_offset,
                byte_length: r.byte_length,
            })
        })
        .collect::<Result<Vec<_>, BundleError>>()?;
    Ok((arrays, raw.metadata))
}

/// Decodes a bundle from an in-memory byte buffer.
pub fn decode_bundle(bytes: &[u8]) -> Result<TensorBundle, BundleError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(BundleError::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(BundleError::ManifestParse("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let rest = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > rest {
        return Err(BundleError::ManifestParse(format!(
            "manifest length {manifest_len} exceeds remaining {rest} bytes"
        )));
    }
    let split = HEADER_LEN + manifest_len as usize;
    let (arrays, metadata) = parse_manifest(&bytes[HEADER_LEN..split])?;
    TensorBundle::from_parts(arrays, bytes[split..].to_vec(), metadata)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<TensorBundle, BundleError> {
    let mut file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = file.read(&mut header[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < 8 || &header[..8] != MAGIC {
        return Err(BundleError::MagicMismatch);
    }
    if got < HEADER_LEN {
        return Err(BundleError::ManifestParse("truncated header".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(header[12..20].try_into().expect("8 bytes"));
    let rest = file_len.saturating_sub(HEADER_LEN as u64);
    if manifest_len > rest {
        return Err(BundleError::ManifestParse(format!(
            "manifest length {manifest_len} exceeds remaining {rest} bytes"
        )));
    }
    let mut manifest = vec![0u8; manifest_len as usize];
    file.read_exact(&mut manifest)?;
    let (arrays, metadata) = parse_manifest(&manifest)?;
    drop(manifest);
    let mut payload = Vec::with_capacity((rest - manifest_len) as usize);
    file.read_to_end(&mut payload)?;
    TensorBundle::from_parts(arrays, payload, metadata)
}

pub fn save_bundle(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let bytes = bundle.to_bytes()?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(manifest: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn single_element_round_trip() {
        let mut b = TensorBundle::new();
        b.insert_f32("x", &[1, 1, 1], &[5.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.bundle");
        save_bundle(&b, &p).unwrap();
        let loaded = load_bundle(&p).unwrap();
        assert_eq!(loaded, b);
        let x = loaded.activation_tensor("x", "mask").unwrap();
        assert_eq!(x.data().as_slice(), &[5.0]);
        assert_eq!(x.mask(), &[true]);
    }

    #[test]
    fn empty_bundle_is_header_plus_manifest() {
        let b = TensorBundle::new();
        let bytes = b.to_bytes().unwrap();
        let manifest = br#"{"arrays":[],"metadata":{}}"#;
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), HEADER_LEN + manifest.len());
        assert_eq!(&bytes[HEADER_LEN..], manifest);
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn offsets_are_running_sums() {
        let mut b = TensorBundle::new();
        b.insert_f32("a", &[2, 3], &[0.0; 6]).unwrap();
        b.insert_i64("b", &[4], &[1, 2, 3, 4]).unwrap();
        b.insert_u8("c", &[3], &[1, 0, 1]).unwrap();
        let mut running = 0u64;
        for d in b.arrays() {
            assert_eq!(d.byte_offset, running);
            running += d.byte_length;
        }
        assert_eq!(running, 24 + 32 + 3);
        assert_eq!(b.payload().len() as u64, running);
    }

    #[test]
    fn short_payload_is_bounds_error() {
        let m =
            r#"{"arrays":[{"name":"x","dtype":"f32","shape":[2,3],"byte_offset":0,"byte_length":24}],"metadata":{}}"#;
        let err = decode_bundle(&raw_file(m, &[0u8; 20])).unwrap_err();
        assert!(matches!(err, BundleError::PayloadBounds { end: 24, payload_len: 20, .. }), "{err}");
    }

    #[test]
    fn length_disagreeing_with_shape_is_rejected() {
        let m =
            r#"{"arrays":[{"name":"x","dtype":"f32","shape":[2,3],"byte_offset":0,"byte_length":20}],"metadata":{}}"#;
        let err = decode_bundle(&raw_file(m, &[0u8; 20])).unwrap_err();
        assert!(matches!(err, BundleError::InvariantViolation(_)), "{err}");
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(decode_bundle(b"NOTMAGIC\x01\0\0\0"), Err(BundleError::MagicMismatch)));
        assert!(matches!(decode_bundle(&raw_file("{nope", &[])), Err(BundleError::ManifestParse(_))));
        let m = r#"{"arrays":[{"name":"x","dtype":"f16","shape":[1],"byte_offset":0,"byte_length":2}]}"#;
        assert!(matches!(decode_bundle(&raw_file(m, &[0, 0])), Err(BundleError::DtypeUnsupported(s)) if s == "f16"));
        let m = r#"{"arrays":[
            {"name":"x","dtype":"u8","shape":[2],"byte_offset":0,"byte_length":2},
            {"name":"y","dtype":"u8","shape":[2],"byte_offset":1,"byte_length":2}]}"#;
        assert!(matches!(decode_bundle(&raw_file(m, &[0; 3])), Err(BundleError::InvariantViolation(_))));
        let m = r#"{"arrays":[
            {"name":"x","dtype":"u8","shape":[1],"byte_offset":0,"byte_length":1},
            {"name":"x","dtype":"u8","shape":[1],"byte_offset":1,"byte_length":1}]}"#;
        assert!(matches!(decode_bundle(&raw_file(m, &[0; 2])), Err(BundleError::InvariantViolation(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing-dir").join("x.bundle");
        assert!(matches!(save_bundle(&TensorBundle::new(), &p), Err(BundleError::Io(_))));
    }

    #[test]
    fn mask_shape_is_checked() {
        let mut b = TensorBundle::new();
        b.insert_f32("resid", &[2, 2, 1], &[1.0; 4]).unwrap();
        b.insert_u8("mask", &[4], &[1; 4]).unwrap();
        assert!(matches!(b.activation_tensor("resid", "mask"), Err(BundleError::BadShape { .. })));
    }
}
