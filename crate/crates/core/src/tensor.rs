//! Binary container for dense `f32` tensors with a JSON header.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes  "CPROBE01"
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON
//!              {"version":1,"dtype":"f32","shape":[...],"meta":{...}}
//! payload      row-major little-endian IEEE-754 binary32, 4 * prod(shape) bytes
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CPROBE01";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32";

/// Structured decoding/encoding failures. Each variant has a stable code.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic bytes (expected \"CPROBE01\")")]
    BadMagic,
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    #[error("header is not valid UTF-8 JSON: {0}")]
    Header(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("shape {shape:?} needs {expected} payload bytes, found {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },
    #[error("shape {0:?} overflows the addressable size")]
    ShapeOverflow(Vec<usize>),
    #[error("header of {0} bytes exceeds the u32 length field")]
    HeaderTooLarge(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub fn code(&self) -> &'static str {
        match self {
            TensorError::BadMagic => "E_MAGIC",
            TensorError::Truncated { .. } => "E_TRUNCATED",
            TensorError::Header(_) => "E_HEADER",
            TensorError::UnsupportedVersion(_) => "E_VERSION",
            TensorError::UnsupportedDtype(_) => "E_DTYPE",
            TensorError::ShapeMismatch { .. } => "E_SHAPE",
            TensorError::ShapeOverflow(_) => "E_OVERFLOW",
            TensorError::HeaderTooLarge(_) => "E_HEADER_SIZE",
            TensorError::Io(_) => "E_IO",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default)]
    meta: Map<String, Value>,
}

/// A dense row-major tensor with free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub meta: Map<String, Value>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(
        shape: Vec<usize>,
        data: Vec<f32>,
        meta: Map<String, Value>,
    ) -> Result<Self, TensorError> {
        let count = element_count(&shape).ok_or_else(|| TensorError::ShapeOverflow(shape.clone()))?;
        if count != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected: count as u64 * 4,
                actual: data.len() as u64 * 4,
            });
        }
        Ok(Self { shape, data, meta })
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }

    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(Value::as_u64)
    }

    pub fn meta_bool(&self, key: &str) -> Option<bool> {
        self.meta.get(key).and_then(Value::as_bool)
    }

    pub fn meta_strings(&self, key: &str) -> Option<Vec<String>> {
        self.meta.get(key)?.as_array().and_then(|items| {
            items
                .iter()
                .map(|v| v.as_str().map(str::to_owned))
                .collect()
        })
    }

    pub fn meta_indices(&self, key: &str) -> Option<Vec<usize>> {
        self.meta.get(key)?.as_array().and_then(|items| {
            items
                .iter()
                .map(|v| v.as_u64().map(|u| u as usize))
                .collect()
        })
    }

    /// Serializes into container bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let header = Header {
            version: FORMAT_VERSION,
            dtype: DTYPE.to_owned(),
            shape: self.shape.clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| TensorError::Header(e.to_string()))?;
        let header_len =
            u32::try_from(header.len()).map_err(|_| TensorError::HeaderTooLarge(header.len()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses container bytes. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < MAGIC.len() {
            return Err(TensorError::Truncated {
                section: "magic",
                needed: MAGIC.len() as u64,
                available: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let rest = &bytes[8..];
        if rest.len() < 4 {
            return Err(TensorError::Truncated {
                section: "header length",
                needed: 4,
                available: rest.len() as u64,
            });
        }
        let header_len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(TensorError::Truncated {
                section: "header",
                needed: header_len as u64,
                available: rest.len() as u64,
            });
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| TensorError::Header(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(TensorError::UnsupportedVersion(header.version));
        }
        if header.dtype != DTYPE {
            return Err(TensorError::UnsupportedDtype(header.dtype));
        }
        let payload = &rest[header_len..];
        let expected = element_count(&header.shape)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| TensorError::ShapeOverflow(header.shape.clone()))?;
        if payload.len() != expected {
            if payload.len() < expected {
                return Err(TensorError::Truncated {
                    section: "payload",
                    needed: expected as u64,
                    available: payload.len() as u64,
                });
            }
            return Err(TensorError::ShapeMismatch {
                shape: header.shape,
                expected: expected as u64,
                actual: payload.len() as u64,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            shape: header.shape,
            data,
            meta: header.meta,
        })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    Tensor::from_bytes(&fs::read(path)?)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let bytes = tensor.to_bytes()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Tensor {
        let mut meta = Map::new();
        meta.insert("layer".into(), json!(3));
        Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, f32::MIN_POSITIVE, 7.25, -0.0], meta).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let t = sample();
        let bytes = t.to_bytes().unwrap();
        let back = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(back.shape, t.shape);
        let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_u64("layer"), Some(3));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        write_tensor(&sample(), &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), sample());
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert_eq!(Tensor::from_bytes(&bytes).unwrap_err().code(), "E_MAGIC");
    }

    #[test]
    fn truncated_payload_and_trailing_bytes() {
        let bytes = sample().to_bytes().unwrap();
        let err = Tensor::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err.code(), "E_TRUNCATED");
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(Tensor::from_bytes(&longer).unwrap_err().code(), "E_SHAPE");
    }

    #[test]
    fn rejects_other_dtype_and_version() {
        let header = br#"{"version":1,"dtype":"f64","shape":[1],"meta":{}}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 8]);
        assert_eq!(Tensor::from_bytes(&bytes).unwrap_err().code(), "E_DTYPE");

        let header = br#"{"version":2,"dtype":"f32","shape":[1],"meta":{}}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 4]);
        assert_eq!(Tensor::from_bytes(&bytes).unwrap_err().code(), "E_VERSION");
    }

    #[test]
    fn overflowing_shape_is_structured() {
        let header = format!(
            r#"{{"version":1,"dtype":"f32","shape":[{},{}],"meta":{{}}}}"#,
            usize::MAX,
            4
        );
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        assert_eq!(Tensor::from_bytes(&bytes).unwrap_err().code(), "E_OVERFLOW");
    }

    #[test]
    fn new_checks_data_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3], Map::new()).is_err());
        let empty = Tensor::new(vec![0, 5], vec![], Map::new()).unwrap();
        assert_eq!(Tensor::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
    }
}
