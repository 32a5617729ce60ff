use std::time::Instant;

use serde::Serialize;

use super::wire::encode_blobs;
use super::{
    check_encodable, decode_index_stream, decompress, encode, CodecId, FlatCursor, IndexLayout, PatchError,
    SparsePatch, SparseRepresentation,
};
use crate::checkpoint::Checkpoint;

/// Bytes per change in the raw int32 COO baseline: row, column, value.
pub const COO_BASELINE_BYTES_PER_CHANGE: usize = 4 + 4 + 2;

const TIMING_ROUNDS: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct CompressionMeasurement {
    pub layout: IndexLayout,
    pub codec: CodecId,
    pub changes: usize,
    pub dense_bytes: usize,
    /// Uncompressed raw int32 COO size of the same change set.
    pub coo_baseline_bytes: usize,
    /// Uncompressed index + value streams in this layout.
    pub payload_bytes: usize,
    /// Compressed index + value blobs, excluding the JSON header.
    pub compressed_bytes: usize,
    /// `coo_baseline_bytes / compressed_bytes`; `None` for an empty patch.
    pub sparse_ratio: Option<f64>,
    /// `dense_bytes / compressed_bytes`; `None` for an empty patch.
    pub full_ratio: Option<f64>,
    /// Payload bytes per second through layout encoding and compression.
    pub encode_bytes_per_sec: f64,
    /// Payload bytes per second through decompression and layout decoding.
    pub decode_bytes_per_sec: f64,
    pub empty_patch: bool,
}

pub fn measure_compression(
    previous: &Checkpoint,
    current: &Checkpoint,
    repr: SparseRepresentation,
    codec: CodecId,
) -> Result<CompressionMeasurement, PatchError> {
    let patch = encode(current, previous, repr, codec)?;
    measure_layout(&patch, previous.dense_bytes(), repr.layout(), codec)
}

/// Measures an already computed change set under any index layout.
pub fn measure_layout(
    patch: &SparsePatch,
    dense_bytes: usize,
    layout: IndexLayout,
    codec: CodecId,
) -> Result<CompressionMeasurement, PatchError> {
    let repr = match layout {
        IndexLayout::FlatInt32 => SparseRepresentation::FlatInt32,
        IndexLayout::CooInt32 | IndexLayout::CooDeltaInt32 => SparseRepresentation::CooInt32,
        IndexLayout::CooDownscaled => SparseRepresentation::CooDownscaled,
    };
    let patch = patch.clone().with_encoding(repr, codec);
    check_encodable(&patch)?;

    let mut best_enc = f64::INFINITY;
    let mut best_dec = f64::INFINITY;
    let mut blobs = None;
    for _ in 0..TIMING_ROUNDS {
        let t0 = Instant::now();
        let b = encode_blobs(&patch, layout)?;
        best_enc = best_enc.min(t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let mut flat = FlatCursor::default();
        for (t, (i, v)) in patch.tensors.iter().zip(b.index.iter().zip(&b.value)) {
            let idx = decompress(i, codec)?;
            let _vals = decompress(v, codec)?;
            let back = decode_index_stream(layout, &t.name, &t.shape, &idx, t.len(), &mut flat)?;
            debug_assert_eq!(back, t.indices);
        }
        best_dec = best_dec.min(t0.elapsed().as_secs_f64());
        blobs = Some(b);
    }
    let blobs = blobs.expect("at least one round");

    let changes = patch.num_changes();
    let compressed_bytes: usize = blobs.index.iter().chain(&blobs.value).map(Vec::len).sum();
    let coo_baseline_bytes = changes * COO_BASELINE_BYTES_PER_CHANGE;
    let empty_patch = changes == 0;
    let ratio = |num: usize| (!empty_patch && compressed_bytes > 0).then(|| num as f64 / compressed_bytes as f64);
    let rate = |secs: f64| if secs > 0.0 { blobs.raw_bytes as f64 / secs } else { f64::INFINITY };
    Ok(CompressionMeasurement {
        layout,
        codec,
        changes,
        dense_bytes,
        coo_baseline_bytes,
        payload_bytes: blobs.raw_bytes,
        compressed_bytes,
        sparse_ratio: ratio(coo_baseline_bytes),
        full_ratio: ratio(dense_bytes),
        encode_bytes_per_sec: rate(best_enc),
        decode_bytes_per_sec: rate(best_dec),
        empty_patch,
    })
}
