//! The `PULP` patch wire format.
//!
//! ```text
//! "PULP" | u32 version | u64 header_len | JSON header | blobs
//! ```
//!
//! Blobs follow the header in tensor order: the compressed index stream, then
//! the compressed value stream (little-endian BF16), for each tensor. Index
//! and value streams are compressed independently.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    check_encodable, compress, decode_index_stream, decompress, encode_index_stream, CodecId, FlatCursor, PatchError,
    SparsePatch, SparseRepresentation, TensorPatch,
};
use crate::bf16::Bf16;
use crate::checkpoint::WeightsHash;

pub const PATCH_MAGIC: &[u8; 4] = b"PULP";
pub const PATCH_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Serialize, Deserialize)]
struct Header {
    base_step: u64,
    target_step: u64,
    anchor_step: Option<u64>,
    target_hash: String,
    codec: u8,
    representation: String,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    changes: usize,
    index_bytes: u64,
    value_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row_delta_bytes: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col_delta_bytes: Option<u8>,
}

/// Compressed per-tensor streams, in header order.
pub(crate) struct EncodedBlobs {
    pub index: Vec<Vec<u8>>,
    pub value: Vec<Vec<u8>>,
    /// Uncompressed index + value bytes.
    pub raw_bytes: usize,
}

pub(crate) fn encode_blobs(patch: &SparsePatch, layout: super::IndexLayout) -> Result<EncodedBlobs, PatchError> {
    let mut flat = FlatCursor::default();
    let mut blobs = EncodedBlobs {
        index: Vec::with_capacity(patch.tensors.len()),
        value: Vec::with_capacity(patch.tensors.len()),
        raw_bytes: 0,
    };
    for t in &patch.tensors {
        let idx = encode_index_stream(layout, t, &mut flat)?;
        let vals: Vec<u8> = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        blobs.raw_bytes += idx.len() + vals.len();
        blobs.index.push(compress(&idx, patch.codec));
        blobs.value.push(compress(&vals, patch.codec));
    }
    Ok(blobs)
}

pub fn patch_to_bytes(patch: &SparsePatch) -> Result<Vec<u8>, PatchError> {
    check_encodable(patch)?;
    for w in patch.tensors.windows(2) {
        if w[0].name >= w[1].name {
            return Err(PatchError::InvalidHeader(format!(
                "tensor `{}` is out of name order",
                w[1].name
            )));
        }
    }
    let blobs = encode_blobs(patch, patch.representation.layout())?;
    let downscaled = patch.representation == SparseRepresentation::CooDownscaled;
    let header = Header {
        base_step: patch.base_step,
        target_step: patch.target_step,
        anchor_step: patch.anchor_step,
        target_hash: patch.target_hash.to_hex(),
        codec: patch.codec.id(),
        representation: patch.representation.tag().to_string(),
        tensors: patch
            .tensors
            .iter()
            .zip(blobs.index.iter().zip(&blobs.value))
            .map(|(t, (i, v))| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
                changes: t.len(),
                index_bytes: i.len() as u64,
                value_bytes: v.len() as u64,
                row_delta_bytes: downscaled.then_some(1),
                col_delta_bytes: downscaled.then_some(2),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialization is infallible");
    let body: usize = blobs.index.iter().chain(&blobs.value).map(Vec::len).sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + body);
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&PATCH_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (i, v) in blobs.index.iter().zip(&blobs.value) {
        out.extend_from_slice(i);
        out.extend_from_slice(v);
    }
    Ok(out)
}

pub fn patch_from_bytes(bytes: &[u8]) -> Result<SparsePatch, PatchError> {
    if bytes.len() < 4 {
        return Err(if PATCH_MAGIC.starts_with(bytes) {
            PatchError::Truncated("missing preamble".into())
        } else {
            PatchError::BadMagic
        });
    }
    if &bytes[..4] != PATCH_MAGIC {
        return Err(PatchError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(PatchError::Truncated("missing preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PATCH_VERSION {
        return Err(PatchError::VersionMismatch { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| PatchError::Truncated("header extends past end of file".into()))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| PatchError::InvalidHeader(e.to_string()))?;
    let codec = CodecId::from_id(header.codec)?;
    let representation: SparseRepresentation = header.representation.parse().map_err(PatchError::InvalidHeader)?;
    let target_hash = WeightsHash::from_hex(&header.target_hash).map_err(|e| PatchError::InvalidHeader(e.to_string()))?;

    let mut rest = &bytes[header_end..];
    let mut take = |n: u64, what: &str, name: &str| -> Result<&[u8], PatchError> {
        if n > rest.len() as u64 {
            return Err(PatchError::Truncated(format!("{what} blob of tensor `{name}`")));
        }
        let (head, tail) = rest.split_at(n as usize);
        rest = tail;
        Ok(head)
    };

    let layout = representation.layout();
    let mut flat = FlatCursor::default();
    let mut tensors: Vec<TensorPatch> = Vec::with_capacity(header.tensors.len());
    for th in header.tensors {
        if let Some(prev) = tensors.last() {
            if prev.name >= th.name {
                return Err(PatchError::InvalidHeader(format!("tensor `{}` is out of name order", th.name)));
            }
        }
        let idx_blob = take(th.index_bytes, "index", &th.name)?;
        let val_blob = take(th.value_bytes, "value", &th.name)?;
        let idx = decompress(idx_blob, codec)?;
        let vals = decompress(val_blob, codec)?;
        if vals.len() != th.changes * 2 {
            return Err(PatchError::CountMismatch {
                name: th.name,
                indices: th.changes,
                values: vals.len() / 2,
            });
        }
        let indices = decode_index_stream(layout, &th.name, &th.shape, &idx, th.changes, &mut flat)?;
        let values = vals.chunks_exact(2).map(|p| Bf16::from_le_bytes([p[0], p[1]])).collect();
        tensors.push(TensorPatch {
            name: th.name,
            shape: th.shape,
            indices,
            values,
        });
    }
    if !rest.is_empty() {
        return Err(PatchError::InvalidHeader(format!("{} trailing bytes after last blob", rest.len())));
    }
    Ok(SparsePatch {
        base_step: header.base_step,
        target_step: header.target_step,
        anchor_step: header.anchor_step,
        target_hash,
        codec,
        representation,
        tensors,
    })
}

pub fn write_patch(patch: &SparsePatch, path: impl AsRef<Path>) -> Result<(), PatchError> {
    fs::write(path, patch_to_bytes(patch)?)?;
    Ok(())
}

pub fn read_patch(path: impl AsRef<Path>) -> Result<SparsePatch, PatchError> {
    patch_from_bytes(&fs::read(path)?)
}
