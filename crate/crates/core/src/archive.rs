//! `.pgbt` tensor archives.
//!
//! Layout: an 8-byte little-endian header length `h`, then `h` bytes of UTF-8
//! JSON manifest, then the raw payload. Manifest offsets are relative to the
//! start of the payload. Tensor values are little-endian IEEE-754 `f32`.
//!
//! ```text
//! {"tensors": [{"name": "layer0.Wq", "shape": [768, 768], "dtype": "f32", "offset": 0}, ...],
//!  "metadata": {...}}
//! ```
//!
//! `metadata` is optional free-form JSON used by the grouping and model
//! layers; plain tensor archives omit it.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{PgbError, Result};
use crate::tensor::Matrix;

pub const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> Result<u64> {
        let width = dtype_width(&self.dtype)?;
        Ok(self.numel() as u64 * width)
    }
}

fn dtype_width(dtype: &str) -> Result<u64> {
    match dtype {
        DTYPE_F32 => Ok(4),
        other => Err(PgbError::Format(format!("unknown dtype {other:?}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    metadata: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
    pub metadata: Map<String, Value>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    /// Appends an `f32` tensor at the end of the payload.
    pub fn insert_f32(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        if self.contains(name) {
            return Err(PgbError::Format(format!("duplicate tensor name {name:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(PgbError::Shape(format!(
                "tensor {name:?} has shape {shape:?} but {} values",
                values.len()
            )));
        }
        let offset = self.payload.len() as u64;
        self.payload.reserve(values.len() * 4);
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name: name.to_owned(),
            shape: shape.to_vec(),
            dtype: DTYPE_F32.to_owned(),
            offset,
        });
        Ok(())
    }

    /// Stores a matrix, narrowing to `f32`.
    pub fn insert_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        let values: Vec<f32> = m.as_slice().iter().map(|&v| v as f32).collect();
        self.insert_f32(name, &[m.rows(), m.cols()], &values)
    }

    pub fn insert_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        let values: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        self.insert_f32(name, &[v.len()], &values)
    }

    fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.entry(name)
            .ok_or_else(|| PgbError::Format(format!("missing tensor {name:?}")))
    }

    pub fn tensor_f32(&self, name: &str) -> Result<Vec<f32>> {
        let entry = self.require(name)?;
        let start = entry.offset as usize;
        let end = start + entry.byte_len()? as usize;
        Ok(self.payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let entry = self.require(name)?;
        let [rows, cols] = entry.shape[..] else {
            return Err(PgbError::Shape(format!(
                "tensor {name:?} has shape {:?}, expected 2-D",
                entry.shape
            )));
        };
        let values = self.tensor_f32(name)?;
        Matrix::from_vec(rows, cols, values.into_iter().map(f64::from).collect())
            .map_err(|e| PgbError::Validation(format!("tensor {name:?}: {e}")))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let entry = self.require(name)?;
        if entry.shape.len() != 1 {
            return Err(PgbError::Shape(format!(
                "tensor {name:?} has shape {:?}, expected 1-D",
                entry.shape
            )));
        }
        let values: Vec<f64> = self.tensor_f32(name)?.into_iter().map(f64::from).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PgbError::Validation(format!(
                "tensor {name:?} has non-finite values"
            )));
        }
        Ok(values)
    }

    /// Checks unique names, known dtypes, and in-bounds non-overlapping
    /// byte ranges.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut spans = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if !names.insert(e.name.as_str()) {
                return Err(PgbError::Format(format!("duplicate tensor name {:?}", e.name)));
            }
            let len = e.byte_len()?;
            let end = e
                .offset
                .checked_add(len)
                .ok_or_else(|| PgbError::Format(format!("offset overflow in {:?}", e.name)))?;
            if end > self.payload.len() as u64 {
                return Err(PgbError::Format(format!(
                    "tensor {:?} spans bytes {}..{end} but payload has {}",
                    e.name,
                    e.offset,
                    self.payload.len()
                )));
            }
            if len > 0 {
                spans.push((e.offset, end, e.name.as_str()));
            }
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(PgbError::Format(format!(
                    "tensors {:?} and {:?} overlap",
                    pair[0].2, pair[1].2
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let manifest = Manifest {
            tensors: self.entries.clone(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + self.payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| PgbError::Format("file shorter than the 8-byte header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes);
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                PgbError::Format(format!(
                    "declared header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| PgbError::Format(format!("malformed manifest: {e}")))?;
        let archive = Self {
            entries: manifest.tensors,
            payload: bytes[header_end..].to_vec(),
            metadata: manifest.metadata,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tensor_archive() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_f32("layer0.Wq", &[2, 2], &[1.0, -2.5, 3.25, 0.0])
            .unwrap();
        a.insert_f32("layer0.Wk", &[1, 3], &[7.0, 8.0, 9.0]).unwrap();
        a
    }

    #[test]
    fn single_tensor_round_trip() {
        let mut a = TensorArchive::new();
        a.insert_f32("w", &[3], &[1.5, f32::MIN_POSITIVE, -0.0]).unwrap();
        let bytes = a.to_bytes().unwrap();
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn named_lookup() {
        let a = TensorArchive::from_bytes(&two_tensor_archive().to_bytes().unwrap()).unwrap();
        assert_eq!(a.tensor_f32("layer0.Wq").unwrap(), vec![1.0, -2.5, 3.25, 0.0]);
        assert_eq!(a.matrix("layer0.Wk").unwrap().shape(), (1, 3));
        assert!(a.tensor_f32("layer0.Wv").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("pgbt-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.pgbt");
        let mut a = two_tensor_archive();
        a.metadata.insert("note".into(), Value::from("x"));
        a.save(&path).unwrap();
        assert_eq!(TensorArchive::load(&path).unwrap(), a);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = two_tensor_archive().to_bytes().unwrap();
        let err = TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, PgbError::Format(_)), "{err}");
        assert!(TensorArchive::from_bytes(&bytes[..5]).is_err());
    }

    fn with_manifest(json: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (json.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn malformed_manifests_are_rejected() {
        let cases = [
            r#"{"tensors": [{"name": "a", "shape": [1], "dtype": "f16", "offset": 0}]}"#,
            r#"{"tensors": [{"name": "a", "shape": [2], "dtype": "f32", "offset": 4}]}"#,
            r#"{"tensors": [{"name": "a", "shape": [1], "dtype": "f32", "offset": 0},
                            {"name": "a", "shape": [1], "dtype": "f32", "offset": 4}]}"#,
            r#"{"tensors": [{"name": "a", "shape": [2], "dtype": "f32", "offset": 0},
                            {"name": "b", "shape": [1], "dtype": "f32", "offset": 4}]}"#,
            r#"{"tensors": "#,
        ];
        for json in cases {
            assert!(
                TensorArchive::from_bytes(&with_manifest(json, &[0u8; 8])).is_err(),
                "{json}"
            );
        }
        let mut huge = with_manifest("{}", &[]);
        huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(TensorArchive::from_bytes(&huge).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                proptest::collection::vec(any::<u32>(), 1..20), 1..5)
        ) {
            let mut a = TensorArchive::new();
            for (i, bits) in tensors.iter().enumerate() {
                // Arbitrary bit patterns, NaN payloads included.
                let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
                a.insert_f32(&format!("t{i}"), &[vals.len()], &vals).unwrap();
            }
            let bytes = a.to_bytes().unwrap();
            let b = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(b.payload(), a.payload());
            prop_assert_eq!(b.entries(), a.entries());
            for (i, bits) in tensors.iter().enumerate() {
                let back: Vec<u32> =
                    b.tensor_f32(&format!("t{i}")).unwrap().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(&back, bits);
            }
        }
    }
}
