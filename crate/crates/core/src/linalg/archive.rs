//! Tensor archive: a JSON index plus one sidecar binary of little-endian
//! `f64` values, row-major, concatenated in index order.
//!
//! ```json
//! {"data_file": "weights.bin",
//!  "tensors": [{"name": "w0", "rows": 2, "cols": 3, "dtype": "f64",
//!               "offset": 0, "byte_length": 48}]}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: usize,
    pub byte_length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveIndex {
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    tensors: Vec<(String, Matrix)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor. Insertion order is the on-disk order.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = m;
        } else {
            self.tensors.push((name, m));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Parse(format!("tensor '{name}' missing from archive")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn encode(&self, data_file: &str) -> (ArchiveIndex, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, m) in &self.tensors {
            let offset = bytes.len();
            for v in m.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
                dtype: "f64".into(),
                offset,
                byte_length: bytes.len() - offset,
            });
        }
        (
            ArchiveIndex {
                data_file: data_file.to_string(),
                tensors: entries,
            },
            bytes,
        )
    }

    /// Decodes an index and its sidecar bytes. Rejects overlapping or
    /// gapped layouts, trailing bytes, duplicate names, wrong dtypes and
    /// non-finite values.
    pub fn decode(index: &ArchiveIndex, data: &[u8]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut cursor = 0usize;
        let mut tensors = Vec::with_capacity(index.tensors.len().min(1024));
        for e in &index.tensors {
            if e.dtype != "f64" {
                return Err(Error::Parse(format!(
                    "tensor '{}': unsupported dtype '{}'",
                    e.name, e.dtype
                )));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Parse(format!("duplicate tensor name '{}'", e.name)));
            }
            let expected = e
                .rows
                .checked_mul(e.cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Parse(format!("tensor '{}': size overflow", e.name)))?;
            if e.byte_length != expected {
                return Err(Error::Parse(format!(
                    "tensor '{}': byte_length {} but {}x{} f64 needs {}",
                    e.name, e.byte_length, e.rows, e.cols, expected
                )));
            }
            if e.offset != cursor {
                return Err(Error::Parse(format!(
                    "tensor '{}': offset {} but previous tensor ends at {}",
                    e.name, e.offset, cursor
                )));
            }
            let end = cursor + expected;
            let chunk = data.get(cursor..end).ok_or_else(|| {
                Error::Parse(format!(
                    "tensor '{}': needs bytes {}..{} but data has {}",
                    e.name,
                    cursor,
                    end,
                    data.len()
                ))
            })?;
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            let m = Matrix::from_vec(e.rows, e.cols, values)?;
            m.ensure_finite(&format!("tensor '{}'", e.name))?;
            tensors.push((e.name.clone(), m));
            cursor = end;
        }
        if cursor != data.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after last tensor",
                data.len() - cursor
            )));
        }
        Ok(Self { tensors })
    }

    pub fn parse_index(json: &str) -> Result<ArchiveIndex> {
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("archive index: {e}")))
    }

    /// Writes `<index_path>` and its sidecar (same stem, `.bin`).
    pub fn write(&self, index_path: &Path) -> Result<()> {
        let data_path = sidecar_path(index_path);
        let data_name = data_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("tensors.bin")
            .to_string();
        let (index, bytes) = self.encode(&data_name);
        fs::write(&data_path, bytes)?;
        fs::write(index_path, serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    pub fn read(index_path: &Path) -> Result<Self> {
        let index = Self::parse_index(&fs::read_to_string(index_path)?)?;
        if index.data_file.contains('/') || index.data_file.contains('\\') {
            return Err(Error::Parse(
                "data_file must be a bare file name next to the index".into(),
            ));
        }
        let dir = index_path.parent().unwrap_or_else(|| Path::new("."));
        let data = fs::read(dir.join(&index.data_file))?;
        Self::decode(&index, &data)
    }
}

fn sidecar_path(index_path: &Path) -> PathBuf {
    index_path.with_extension("bin")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert("w", Matrix::from_rows(&[[1.0, -2.5], [0.125, 3.0]]).unwrap());
        a.insert("g", Matrix::from_rows(&[[1.0, 1.0, 1.0]]).unwrap());
        a
    }

    #[test]
    fn encode_decode() {
        let a = sample();
        let (idx, bytes) = a.encode("x.bin");
        assert_eq!(idx.tensors[1].offset, 32);
        assert_eq!(bytes.len(), 56);
        assert_eq!(TensorArchive::decode(&idx, &bytes).unwrap(), a);
    }

    #[test]
    fn rejects_layout_errors() {
        let (idx, bytes) = sample().encode("x.bin");

        let mut gap = idx.clone();
        gap.tensors[1].offset = 40;
        assert!(TensorArchive::decode(&gap, &bytes).is_err());

        let mut dtype = idx.clone();
        dtype.tensors[0].dtype = "f32".into();
        assert!(TensorArchive::decode(&dtype, &bytes).is_err());

        assert!(TensorArchive::decode(&idx, &bytes[..50]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(TensorArchive::decode(&idx, &long).is_err());

        let mut huge = idx.clone();
        huge.tensors[0].rows = usize::MAX;
        assert!(TensorArchive::decode(&huge, &bytes).is_err());

        let mut dup = idx;
        dup.tensors[1].name = "w".into();
        assert!(TensorArchive::decode(&dup, &bytes).is_err());
    }

    #[test]
    fn rejects_nan_payload() {
        let mut a = TensorArchive::new();
        a.insert("w", Matrix::from_rows(&[[1.0]]).unwrap());
        let (idx, _) = a.encode("x.bin");
        assert!(TensorArchive::decode(&idx, &f64::NAN.to_le_bytes()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        sample().write(&path).unwrap();
        assert!(dir.path().join("weights.bin").exists());
        assert_eq!(TensorArchive::read(&path).unwrap(), sample());
    }
}
