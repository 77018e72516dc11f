//! Single-file tensor archive used for checkpoints and extractor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PENHARCH"  u32 version  u64 header_len  header (JSON)  payload
//! ```
//!
//! The header is `{"version", "meta", "tensors": [{name, dtype, shape, offset, nbytes}], "sha256"}`
//! where offsets index into the payload and `sha256` is the hex digest of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"PENHARCH";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Default for Archive {
    fn default() -> Self {
        Self::new(serde_json::Value::Null)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new(), payload: Vec::new() }
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "archive tensor {name}: shape/data mismatch");
        assert!(self.entry(name).is_none(), "duplicate archive tensor {name}");
        let offset = self.payload.len();
        for &v in data {
            v.write_le(&mut self.payload);
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            offset,
            nbytes: self.payload.len() - offset,
        });
    }

    fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    /// Reads a tensor, converting from the stored precision to `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Option<(Vec<usize>, Vec<T>)> {
        let e = self.entry(name)?;
        let bytes = &self.payload[e.offset..e.offset + e.nbytes];
        let data = match e.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Some((e.shape.clone(), data))
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.entry(name).map(|e| e.dtype)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: ARCHIVE_VERSION,
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
            sha256: hex(&Sha256::digest(&self.payload)),
        };
        let header = serde_json::to_vec(&header).expect("archive header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a penh archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: ARCHIVE_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("malformed header: {e}")))?;
        if header.version != ARCHIVE_VERSION {
            return Err(Error::CheckpointVersion { found: header.version, expected: ARCHIVE_VERSION });
        }
        let payload = bytes[header_end..].to_vec();
        if hex(&Sha256::digest(&payload)) != header.sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        for e in &header.tensors {
            let expected = e.shape.iter().product::<usize>() * e.dtype.size();
            if e.nbytes != expected || e.offset.checked_add(e.nbytes).is_none_or(|end| end > payload.len()) {
                return Err(bad(&format!("tensor {} has inconsistent extent", e.name)));
            }
        }
        Ok(Self { meta: header.meta, entries: header.tensors, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
