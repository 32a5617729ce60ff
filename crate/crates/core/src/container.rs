//! The `PULC` checkpoint container.
//!
//! ```text
//! "PULC" | u32 version | u64 header_len | JSON header (space padded) | payload
//! ```
//!
//! All integers are little-endian. The header is padded so the payload starts
//! on a 64-byte boundary, and every tensor's byte offset (relative to the
//! payload start) is also a multiple of 64. Tensor data is raw little-endian
//! BF16 in row-major order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bf16::Bf16;
use crate::checkpoint::{numel, Checkpoint, ModelError, TensorRecord};

pub const CONTAINER_MAGIC: &[u8; 4] = b"PULC";
pub const CONTAINER_VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected \"PULC\"")]
    BadMagic,
    #[error("unsupported container version {found} (expected {CONTAINER_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes but header records {actual}")]
    ShapeLengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid container header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a checkpoint into container bytes.
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::with_capacity(c.tensors().len());
    let mut offset = 0usize;
    for t in c.tensors() {
        let length = t.len() * 2;
        entries.push(TensorEntry {
            name: t.name().to_string(),
            dtype: "bf16".into(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
            length: length as u64,
        });
        offset = align_up(offset + length);
    }
    let mut header = serde_json::to_vec(&Header { step: c.step(), tensors: entries })
        .expect("header serialization is infallible");
    let padded = align_up(PREAMBLE + header.len()) - PREAMBLE;
    header.resize(padded, b' ');

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let payload_start = out.len();
    for t in c.tensors() {
        let at = align_up(out.len() - payload_start) + payload_start;
        out.resize(at, 0);
        out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    out
}

/// Parses container bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ContainerError> {
    if bytes.len() < 4 {
        return Err(if CONTAINER_MAGIC.starts_with(bytes) {
            ContainerError::Truncated("missing preamble".into())
        } else {
            ContainerError::BadMagic
        });
    }
    if &bytes[..4] != CONTAINER_MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(ContainerError::Truncated("missing preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(ContainerError::VersionMismatch { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| ContainerError::Truncated("header extends past end of file".into()))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| ContainerError::InvalidHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "bf16" {
            return Err(ContainerError::InvalidHeader(format!(
                "tensor `{}` has unsupported dtype `{}`",
                e.name, e.dtype
            )));
        }
        let expected = numel(&e.shape) * 2;
        if e.length as usize != expected {
            return Err(ContainerError::ShapeLengthMismatch {
                name: e.name,
                shape: e.shape,
                expected,
                actual: e.length as usize,
            });
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| ContainerError::Truncated(format!("tensor `{}` extends past end of file", e.name)))?;
        let raw = &payload[e.offset as usize..end as usize];
        let data = raw
            .chunks_exact(2)
            .map(|p| Bf16::from_le_bytes([p[0], p[1]]))
            .collect();
        tensors.push(TensorRecord::new(e.name, e.shape, data)?);
    }
    Ok(Checkpoint::new(header.step, tensors)?)
}

pub fn write_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    fs::write(path, encode_checkpoint(c))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ContainerError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::hash_weights;

    fn sample() -> Checkpoint {
        let a = TensorRecord::new("layer.0.w", vec![2, 2], [1.0, -2.0, 0.5, 3.25].map(Bf16::from_f64).to_vec()).unwrap();
        let b = TensorRecord::new("bias", vec![3], [0.0, -0.0, 7.0].map(Bf16::from_f64).to_vec()).unwrap();
        Checkpoint::new(42, vec![a, b]).unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let c = sample();
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors()[0].name(), "layer.0.w");
        assert_eq!(hash_weights(&back), hash_weights(&c));
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = encode_checkpoint(&sample());
        assert_eq!(&bytes[..4], b"PULC");
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!((PREAMBLE + header_len) % ALIGN, 0);
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        assert!(header.tensors.iter().all(|t| t.offset % 64 == 0));
        assert_eq!(header.tensors[1].offset, 64);
        // first tensor begins right after the header, little-endian 1.0
        assert_eq!(&bytes[16 + header_len..16 + header_len + 2], &[0x80, 0x3F]);
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = encode_checkpoint(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(ContainerError::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(ContainerError::VersionMismatch { found: 2 })));

        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(decode_checkpoint(short), Err(ContainerError::Truncated(_))));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(ContainerError::Truncated(_))));

        // rewrite the first tensor's recorded length
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let edited = text.replacen("\"length\":8", "\"length\":6", 1);
        assert_eq!(edited.len(), text.len());
        bytes[16..16 + header_len].copy_from_slice(edited.as_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(ContainerError::ShapeLengthMismatch { expected: 8, actual: 6, .. })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pulc");
        write_checkpoint(&sample(), &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), sample());
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let c = Checkpoint::empty(3);
        assert_eq!(decode_checkpoint(&encode_checkpoint(&c)).unwrap(), c);
    }
}
