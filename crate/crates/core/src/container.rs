//! Self-describing checkpoint container: a JSON header followed by named
//! little-endian IEEE-754 arrays, all checksummed.
//!
//! Layout: `b"PVAC" | u32 version | u64 header_len | header JSON | payload`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 4] = b"PVAC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a container file")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("file stores {file} but {requested} was requested; convert explicitly")]
    PrecisionMismatch { file: Dtype, requested: Dtype },
    #[error("checksum mismatch for {name}")]
    ChecksumMismatch { name: String },
    #[error("array {0} not present")]
    MissingArray(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Element count.
    len: usize,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    payload_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Builder for a container file.
pub struct ContainerWriter<T: Scalar> {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<(String, Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> ContainerWriter<T> {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        ContainerWriter { kind: kind.to_string(), meta, arrays: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: &[T]) -> &mut Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "array {name}: data length does not match shape"
        );
        self.arrays.push((name.to_string(), shape.to_vec(), data.to_vec()));
        self
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        let mut payload: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, shape, data) in &self.arrays {
            let offset = payload.len();
            let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.bytes());
            for &v in data {
                v.write_le(&mut bytes);
            }
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
                sha256: sha256_hex(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            version: VERSION,
            dtype: T::DTYPE.name().to_string(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: entries,
            payload_sha256: sha256_hex(&payload),
        };
        let header_bytes = serde_json::to_vec(&header)?;

        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        file.write_all(&payload)?;
        Ok(())
    }
}

/// A loaded, checksum-verified container.
#[derive(Debug)]
pub struct ContainerReader<T: Scalar> {
    header: Header,
    arrays: Vec<(Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> ContainerReader<T> {
    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let raw = fs::read(path)?;
        if raw.len() < 16 || &raw[0..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
        if version != VERSION {
            return Err(ContainerError::Version { found: version, expected: VERSION });
        }
        let header_len = u64::from_le_bytes([
            raw[8], raw[9], raw[10], raw[11], raw[12], raw[13], raw[14], raw[15],
        ]) as usize;
        if raw.len() < 16 + header_len {
            return Err(ContainerError::Truncated("header".into()));
        }
        let header: Header = serde_json::from_slice(&raw[16..16 + header_len])?;
        let file_dtype = Dtype::from_name(&header.dtype)
            .ok_or_else(|| ContainerError::Truncated(format!("unknown dtype {}", header.dtype)))?;
        if file_dtype != T::DTYPE {
            return Err(ContainerError::PrecisionMismatch { file: file_dtype, requested: T::DTYPE });
        }
        let payload = &raw[16 + header_len..];
        if sha256_hex(payload) != header.payload_sha256 {
            return Err(ContainerError::ChecksumMismatch { name: "<payload>".into() });
        }
        let width = T::DTYPE.bytes();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let end = entry.offset + entry.len * width;
            if end > payload.len() {
                return Err(ContainerError::Truncated(entry.name.clone()));
            }
            let bytes = &payload[entry.offset..end];
            if sha256_hex(bytes) != entry.sha256 {
                return Err(ContainerError::ChecksumMismatch { name: entry.name.clone() });
            }
            let mut data = Vec::with_capacity(entry.len);
            for chunk in bytes.chunks_exact(width) {
                data.push(T::read_le(chunk));
            }
            arrays.push((entry.shape.clone(), data));
        }
        Ok(ContainerReader { header, arrays })
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.header.meta
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.arrays.iter().map(|e| e.name.as_str())
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[T]), ContainerError> {
        for (i, entry) in self.header.arrays.iter().enumerate() {
            if entry.name == name {
                let (shape, data) = &self.arrays[i];
                return Ok((shape, data));
            }
        }
        Err(ContainerError::MissingArray(name.to_string()))
    }

    pub fn array_vec(&self, name: &str) -> Result<Vec<T>, ContainerError> {
        Ok(self.array(name)?.1.to_vec())
    }
}
