//! Sparse value patches between consecutive checkpoints.
//!
//! A patch lists, per tensor, the flat positions whose bit patterns changed and
//! the new BF16 values at those positions. Applying a patch is pure bit
//! assignment, so reconstruction is exact for arbitrarily long chains.

mod compress;
mod indices;
mod measure;
mod wire;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bf16::Bf16;
use crate::checkpoint::{hash_weights, numel, Checkpoint, WeightsHash};

pub use compress::{compress, decompress, CodecError, CodecId};
pub use indices::{
    delta_decode_indices, delta_encode_indices, downscale_coo, downscale_escapes, upscale_coo, IndexError,
    COL_ESCAPE, ESCAPE_OVERHEAD, ROW_ESCAPE,
};
pub use measure::{measure_compression, measure_layout, CompressionMeasurement};
pub use wire::{patch_from_bytes, patch_to_bytes, read_patch, write_patch, PATCH_MAGIC, PATCH_VERSION};

/// Largest coordinate (and, for the flat layout, tensor size) the 32-bit
/// index layouts accept.
pub const MAX_INT32_EXTENT: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("tensor sets differ: only in previous {only_previous:?}, only in current {only_current:?}")]
    TensorSetMismatch {
        only_previous: Vec<String>,
        only_current: Vec<String>,
    },
    #[error("shape mismatch for tensor `{name}`: previous {previous:?}, current {current:?}")]
    ShapeMismatch {
        name: String,
        previous: Vec<usize>,
        current: Vec<usize>,
    },
    #[error("patch references unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("index {index} out of range for tensor `{name}` with {len} elements")]
    IndexOutOfRange { name: String, index: u64, len: usize },
    #[error("tensor `{name}`: {indices} indices but {values} values")]
    CountMismatch { name: String, indices: usize, values: usize },
    #[error("hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: WeightsHash, actual: WeightsHash },
    #[error("tensor `{name}` with extent {extent} exceeds the 32-bit index range of {repr}")]
    TooLarge {
        name: String,
        extent: u64,
        repr: &'static str,
    },
    #[error("tensor `{name}`: {source}")]
    Index {
        name: String,
        #[source]
        source: IndexError,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("bad magic: expected \"PULP\"")]
    BadMagic,
    #[error("unsupported patch version {found} (expected {PATCH_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated patch: {0}")]
    Truncated(String),
    #[error("invalid patch header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How changed positions are laid out on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SparseRepresentation {
    /// Per-tensor 2D coordinates, gap encoded, u8 row gaps and u16 column
    /// entries with escapes.
    #[default]
    CooDownscaled,
    /// Per-tensor absolute 2D coordinates as 32-bit integers.
    CooInt32,
    /// Single global index space over the patched tensors in name order,
    /// 32-bit gaps.
    FlatInt32,
}

impl SparseRepresentation {
    pub const ALL: [SparseRepresentation; 3] = [Self::CooDownscaled, Self::CooInt32, Self::FlatInt32];

    pub fn tag(self) -> &'static str {
        match self {
            Self::CooDownscaled => "COO_DOWNSCALED",
            Self::CooInt32 => "COO_INT32",
            Self::FlatInt32 => "FLAT_INT32",
        }
    }

    pub fn layout(self) -> IndexLayout {
        match self {
            Self::CooDownscaled => IndexLayout::CooDownscaled,
            Self::CooInt32 => IndexLayout::CooInt32,
            Self::FlatInt32 => IndexLayout::FlatInt32,
        }
    }
}

impl fmt::Display for SparseRepresentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SparseRepresentation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.tag() == norm)
            .ok_or_else(|| format!("unknown representation `{s}` (expected COO_DOWNSCALED, COO_INT32 or FLAT_INT32)"))
    }
}

/// Index stream layouts. The three wire representations plus the
/// intermediate gap-encoded int32 COO used when measuring how much each
/// transform contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IndexLayout {
    CooInt32,
    CooDeltaInt32,
    CooDownscaled,
    FlatInt32,
}

/// Changes for one tensor. Indices are flat row-major positions, strictly
/// increasing; `values[i]` is the new bit pattern at `indices[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorPatch {
    pub name: String,
    pub shape: Vec<usize>,
    pub indices: Vec<u64>,
    pub values: Vec<Bf16>,
}

impl TensorPatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePatch {
    pub base_step: u64,
    pub target_step: u64,
    /// Anchor this patch belongs to in a published chain, if any.
    pub anchor_step: Option<u64>,
    pub target_hash: WeightsHash,
    pub codec: CodecId,
    pub representation: SparseRepresentation,
    /// In ascending name order; tensors without changes are omitted.
    pub tensors: Vec<TensorPatch>,
}

impl SparsePatch {
    pub fn num_changes(&self) -> usize {
        self.tensors.iter().map(TensorPatch::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn with_anchor(mut self, anchor: u64) -> Self {
        self.anchor_step = Some(anchor);
        self
    }

    pub fn with_encoding(mut self, repr: SparseRepresentation, codec: CodecId) -> Self {
        self.representation = repr;
        self.codec = codec;
        self
    }
}

/// Checks that both checkpoints hold the same tensor names and shapes.
pub fn check_compatible(previous: &Checkpoint, current: &Checkpoint) -> Result<(), PatchError> {
    let prev_names: BTreeSet<&str> = previous.tensors().iter().map(|t| t.name()).collect();
    let curr_names: BTreeSet<&str> = current.tensors().iter().map(|t| t.name()).collect();
    if prev_names != curr_names {
        return Err(PatchError::TensorSetMismatch {
            only_previous: prev_names.difference(&curr_names).map(|s| s.to_string()).collect(),
            only_current: curr_names.difference(&prev_names).map(|s| s.to_string()).collect(),
        });
    }
    for cur in current.tensors() {
        let prev = previous.tensor(cur.name()).expect("name sets are equal");
        if prev.shape() != cur.shape() {
            return Err(PatchError::ShapeMismatch {
                name: cur.name().to_string(),
                previous: prev.shape().to_vec(),
                current: cur.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Bitwise diff of `current` against `previous`.
pub fn encode(
    current: &Checkpoint,
    previous: &Checkpoint,
    repr: SparseRepresentation,
    codec: CodecId,
) -> Result<SparsePatch, PatchError> {
    check_compatible(previous, current)?;
    let mut tensors = Vec::new();
    for cur in current.sorted_tensors() {
        let prev = previous.tensor(cur.name()).expect("checked above");
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, (a, b)) in prev.data().iter().zip(cur.data()).enumerate() {
            if a != b {
                indices.push(i as u64);
                values.push(*b);
            }
        }
        if !indices.is_empty() {
            tensors.push(TensorPatch {
                name: cur.name().to_string(),
                shape: cur.shape().to_vec(),
                indices,
                values,
            });
        }
    }
    let patch = SparsePatch {
        base_step: previous.step(),
        target_step: current.step(),
        anchor_step: None,
        target_hash: hash_weights(current),
        codec,
        representation: repr,
        tensors,
    };
    check_encodable(&patch)?;
    Ok(patch)
}

/// Rejects patches whose tensors cannot be expressed in the patch's
/// representation.
pub(crate) fn check_encodable(patch: &SparsePatch) -> Result<(), PatchError> {
    for t in &patch.tensors {
        let (rows, cols) = coo_dims(&t.shape);
        let n = numel(&t.shape) as u64;
        let extent = match patch.representation {
            SparseRepresentation::FlatInt32 => n,
            _ => rows.max(cols) as u64,
        };
        if extent > MAX_INT32_EXTENT {
            return Err(PatchError::TooLarge {
                name: t.name.clone(),
                extent,
                repr: patch.representation.tag(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    /// Compare the reconstructed weights against the patch's target hash.
    pub verify_hash: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { verify_hash: true }
    }
}

/// Applies a patch and verifies the result against the target hash.
pub fn decode(previous: &Checkpoint, patch: &SparsePatch) -> Result<Checkpoint, PatchError> {
    decode_with(previous, patch, DecodeOptions::default())
}

pub fn decode_with(previous: &Checkpoint, patch: &SparsePatch, opts: DecodeOptions) -> Result<Checkpoint, PatchError> {
    let mut out = previous.clone();
    apply_in_place(&mut out, patch)?;
    if opts.verify_hash {
        let actual = hash_weights(&out);
        if actual != patch.target_hash {
            return Err(PatchError::HashMismatch {
                expected: patch.target_hash,
                actual,
            });
        }
    }
    Ok(out)
}

/// Overwrites patched positions by direct bit assignment. Does not verify the
/// hash; on error the checkpoint may be partially updated.
pub fn apply_in_place(target: &mut Checkpoint, patch: &SparsePatch) -> Result<(), PatchError> {
    for tp in &patch.tensors {
        if tp.indices.len() != tp.values.len() {
            return Err(PatchError::CountMismatch {
                name: tp.name.clone(),
                indices: tp.indices.len(),
                values: tp.values.len(),
            });
        }
        let tensor = target
            .tensors_mut()
            .iter_mut()
            .find(|t| t.name() == tp.name)
            .ok_or_else(|| PatchError::UnknownTensor(tp.name.clone()))?;
        if tensor.shape() != tp.shape.as_slice() {
            return Err(PatchError::ShapeMismatch {
                name: tp.name.clone(),
                previous: tensor.shape().to_vec(),
                current: tp.shape.clone(),
            });
        }
        let data = tensor.data_mut();
        for (&i, &v) in tp.indices.iter().zip(&tp.values) {
            let slot = data.get_mut(i as usize).ok_or_else(|| PatchError::IndexOutOfRange {
                name: tp.name.clone(),
                index: i,
                len: tp.shape.iter().product(),
            })?;
            *slot = v;
        }
    }
    target.set_step(patch.target_step);
    Ok(())
}

/// 2D view used by the COO layouts: leading extent by the product of the
/// rest. Vectors and scalars are a single row.
pub(crate) fn coo_dims(shape: &[usize]) -> (usize, usize) {
    let n = numel(shape);
    if shape.len() >= 2 {
        (shape[0], n / shape[0])
    } else {
        (1, n)
    }
}

/// Running state for the flat layout, whose gaps continue across tensors.
#[derive(Default)]
pub(crate) struct FlatCursor {
    /// Global offset of the current tensor.
    pub offset: u64,
    /// Global position of the previous change.
    pub prev: Option<u64>,
}

pub(crate) fn encode_index_stream(
    layout: IndexLayout,
    tp: &TensorPatch,
    flat: &mut FlatCursor,
) -> Result<Vec<u8>, PatchError> {
    let mut out = Vec::new();
    match layout {
        IndexLayout::FlatInt32 => {
            let mut gaps = Vec::with_capacity(tp.indices.len());
            for &i in &tp.indices {
                let g = flat.offset + i;
                let gap = match flat.prev {
                    None => g,
                    Some(p) => g - p,
                };
                gaps.push(u32::try_from(gap).map_err(|_| PatchError::TooLarge {
                    name: tp.name.clone(),
                    extent: gap,
                    repr: "FLAT_INT32",
                })?);
                flat.prev = Some(g);
            }
            indices::pack_u32(gaps, &mut out);
            flat.offset += numel(&tp.shape) as u64;
        }
        _ => {
            let (rows, cols) = split_coo(tp);
            match layout {
                IndexLayout::CooInt32 => {
                    indices::pack_u32(rows, &mut out);
                    indices::pack_u32(cols, &mut out);
                }
                IndexLayout::CooDeltaInt32 => {
                    let (rg, ce) = indices::coo_gaps(&rows, &cols);
                    indices::pack_u32(rg, &mut out);
                    indices::pack_u32(ce, &mut out);
                }
                IndexLayout::CooDownscaled => out = downscale_coo(&rows, &cols),
                IndexLayout::FlatInt32 => unreachable!(),
            }
        }
    }
    Ok(out)
}

fn split_coo(tp: &TensorPatch) -> (Vec<u32>, Vec<u32>) {
    let (_, cols) = coo_dims(&tp.shape);
    let cols = cols as u64;
    tp.indices
        .iter()
        .map(|&i| ((i / cols) as u32, (i % cols) as u32))
        .unzip()
}

pub(crate) fn decode_index_stream(
    layout: IndexLayout,
    name: &str,
    shape: &[usize],
    bytes: &[u8],
    count: usize,
    flat: &mut FlatCursor,
) -> Result<Vec<u64>, PatchError> {
    let idx_err = |source: IndexError| PatchError::Index {
        name: name.to_string(),
        source,
    };
    let n = numel(shape) as u64;
    let indices: Vec<u64> = match layout {
        IndexLayout::FlatInt32 => {
            let (gaps, rest) = indices::unpack_u32(bytes, count, "flat gaps").map_err(idx_err)?;
            if !rest.is_empty() {
                return Err(idx_err(IndexError::TrailingBytes(rest.len())));
            }
            let mut out = Vec::with_capacity(count);
            for (position, g) in gaps.into_iter().enumerate() {
                let global = match flat.prev {
                    None => g as u64,
                    Some(_) if g == 0 => return Err(idx_err(IndexError::NonPositiveGap { position })),
                    Some(p) => p + g as u64,
                };
                if global < flat.offset {
                    return Err(PatchError::IndexOutOfRange {
                        name: name.to_string(),
                        index: global,
                        len: n as usize,
                    });
                }
                out.push(global - flat.offset);
                flat.prev = Some(global);
            }
            flat.offset += n;
            out
        }
        _ => {
            let (rows, cols) = match layout {
                IndexLayout::CooInt32 => {
                    let (rows, rest) = indices::unpack_u32(bytes, count, "rows").map_err(idx_err)?;
                    let (cols, rest) = indices::unpack_u32(rest, count, "columns").map_err(idx_err)?;
                    if !rest.is_empty() {
                        return Err(idx_err(IndexError::TrailingBytes(rest.len())));
                    }
                    (rows, cols)
                }
                IndexLayout::CooDeltaInt32 => {
                    let (rg, rest) = indices::unpack_u32(bytes, count, "row gaps").map_err(idx_err)?;
                    let (ce, rest) = indices::unpack_u32(rest, count, "column entries").map_err(idx_err)?;
                    if !rest.is_empty() {
                        return Err(idx_err(IndexError::TrailingBytes(rest.len())));
                    }
                    indices::coo_from_gaps(&rg, &ce).map_err(idx_err)?
                }
                IndexLayout::CooDownscaled => upscale_coo(bytes, count).map_err(idx_err)?,
                IndexLayout::FlatInt32 => unreachable!(),
            };
            let (nrows, ncols) = coo_dims(shape);
            let mut out = Vec::with_capacity(count);
            for (&r, &c) in rows.iter().zip(&cols) {
                if r as usize >= nrows || c as usize >= ncols {
                    return Err(PatchError::IndexOutOfRange {
                        name: name.to_string(),
                        index: r as u64 * ncols as u64 + c as u64,
                        len: n as usize,
                    });
                }
                out.push(r as u64 * ncols as u64 + c as u64);
            }
            out
        }
    };
    for (position, w) in indices.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(idx_err(IndexError::NotStrictlyIncreasing { position: position + 1 }));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= n {
            return Err(PatchError::IndexOutOfRange {
                name: name.to_string(),
                index: last,
                len: n as usize,
            });
        }
    }
    Ok(indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::TensorRecord;

    fn ck(step: u64, tensors: &[(&str, Vec<usize>, Vec<f64>)]) -> Checkpoint {
        Checkpoint::new(
            step,
            tensors
                .iter()
                .map(|(n, s, v)| TensorRecord::new(*n, s.clone(), v.iter().map(|&x| Bf16::from_f64(x)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_checkpoints_give_empty_patch() {
        let a = ck(1, &[("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])]);
        let p = encode(&a, &a, SparseRepresentation::default(), CodecId::Zstd1).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.target_hash, hash_weights(&a));
        assert_eq!(decode(&a, &p).unwrap().tensors(), a.tensors());
    }

    #[test]
    fn single_change() {
        let prev = ck(0, &[("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])]);
        let curr = ck(1, &[("w", vec![4], vec![1.0, 2.0, 3.5, 4.0])]);
        let p = encode(&curr, &prev, SparseRepresentation::CooInt32, CodecId::Identity).unwrap();
        assert_eq!(p.tensors.len(), 1);
        assert_eq!(p.tensors[0].indices, vec![2]);
        assert_eq!(p.tensors[0].values, vec![Bf16::from_f64(3.5)]);
        assert_eq!((p.base_step, p.target_step), (0, 1));
        assert_eq!(decode(&prev, &p).unwrap(), curr);
    }

    #[test]
    fn signed_zero_and_nan_payloads_are_changes() {
        let prev = ck(0, &[("w", vec![2], vec![0.0, 1.0])]);
        let mut curr = ck(1, &[("w", vec![2], vec![-0.0, 1.0])]);
        let p = encode(&curr, &prev, SparseRepresentation::default(), CodecId::Identity).unwrap();
        assert_eq!(p.tensors[0].indices, vec![0]);
        curr.tensors_mut()[0].data_mut()[1] = Bf16::from_bits(0x7FC1);
        let p = encode(&curr, &prev, SparseRepresentation::default(), CodecId::Identity).unwrap();
        assert_eq!(p.tensors[0].indices, vec![0, 1]);
        assert_eq!(decode(&prev, &p).unwrap(), curr);
    }

    #[test]
    fn mismatches_are_named() {
        let a = ck(0, &[("w", vec![2, 2], vec![0.0; 4])]);
        let b = ck(1, &[("w", vec![4], vec![0.0; 4])]);
        match encode(&b, &a, SparseRepresentation::default(), CodecId::Identity) {
            Err(PatchError::ShapeMismatch { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        let c = ck(1, &[("v", vec![2, 2], vec![0.0; 4])]);
        match encode(&c, &a, SparseRepresentation::default(), CodecId::Identity) {
            Err(PatchError::TensorSetMismatch { only_previous, only_current }) => {
                assert_eq!(only_previous, vec!["w"]);
                assert_eq!(only_current, vec!["v"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_errors() {
        let prev = ck(0, &[("w", vec![4], vec![1.0, 2.0, 3.0, 4.0])]);
        let curr = ck(1, &[("w", vec![4], vec![1.0, 2.0, 3.5, 4.0])]);
        let good = encode(&curr, &prev, SparseRepresentation::default(), CodecId::Identity).unwrap();

        let mut bad = good.clone();
        bad.tensors[0].values[0] = Bf16::from_f64(3.75);
        assert!(matches!(decode(&prev, &bad), Err(PatchError::HashMismatch { .. })));
        let out = decode_with(&prev, &bad, DecodeOptions { verify_hash: false }).unwrap();
        assert_eq!(out.tensors()[0].data()[2], Bf16::from_f64(3.75));

        let mut bad = good.clone();
        bad.tensors[0].name = "nope".into();
        assert!(matches!(decode(&prev, &bad), Err(PatchError::UnknownTensor(_))));

        let mut bad = good.clone();
        bad.tensors[0].indices[0] = 4;
        assert!(matches!(decode(&prev, &bad), Err(PatchError::IndexOutOfRange { index: 4, .. })));
    }

    #[test]
    fn coo_view() {
        assert_eq!(coo_dims(&[3, 4, 5]), (3, 20));
        assert_eq!(coo_dims(&[7]), (1, 7));
        assert_eq!(coo_dims(&[]), (1, 1));
    }

    #[test]
    fn layouts_roundtrip_indices() {
        let tp = TensorPatch {
            name: "w".into(),
            shape: vec![300, 70_000],
            indices: vec![0, 1, 5, 69_999, 70_000, 299 * 70_000 + 3],
            values: vec![Bf16::ONE; 6],
        };
        for layout in [IndexLayout::CooInt32, IndexLayout::CooDeltaInt32, IndexLayout::CooDownscaled, IndexLayout::FlatInt32] {
            let bytes = encode_index_stream(layout, &tp, &mut FlatCursor::default()).unwrap();
            let back = decode_index_stream(layout, "w", &tp.shape, &bytes, tp.len(), &mut FlatCursor::default()).unwrap();
            assert_eq!(back, tp.indices, "{layout:?}");
        }
    }

    #[test]
    fn flat_rejects_oversized_tensor() {
        let shape = vec![1usize << 16, (1 << 15) + 1];
        let patch = SparsePatch {
            base_step: 0,
            target_step: 1,
            anchor_step: None,
            target_hash: WeightsHash([0; 32]),
            codec: CodecId::Identity,
            representation: SparseRepresentation::FlatInt32,
            tensors: vec![TensorPatch { name: "big".into(), shape, indices: vec![0], values: vec![Bf16::ONE] }],
        };
        assert!(matches!(check_encodable(&patch), Err(PatchError::TooLarge { .. })));
        let ok = patch.with_encoding(SparseRepresentation::CooDownscaled, CodecId::Identity);
        assert!(check_encodable(&ok).is_ok());
    }
}
