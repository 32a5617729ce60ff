//! Lossless sparse synchronization of BF16 model checkpoints.
//!
//! Consecutive checkpoints of RL fine-tuning differ in a small fraction of
//! their BF16 bit patterns. This crate diffs checkpoints into compact
//! index/value patches, replicates them through an anchored chain on object
//! storage, and provides the analysis behind that sparsity (BF16 update
//! absorption, Adam update bounds) together with a bandwidth-aware cost model
//! for choosing a compressor.
//!
//! Modules:
//! - [`bf16`], [`checkpoint`], [`container`], [`synth`]: the checkpoint model.
//! - [`patch`]: diff, index encodings, compression and the patch wire format.
//! - [`analysis`]: absorption, Adam bounds and sparsity statistics.
//! - [`sync`]: publisher/consumer protocol over an [`sync::ObjectStore`].
//! - [`planner`]: transfer-time model, codec selection and latency model.

pub mod analysis;
pub mod bf16;
pub mod checkpoint;
pub mod container;
pub mod patch;
pub mod planner;
pub mod synth;
pub mod sync;

pub use bf16::{round_to_bf16, Bf16};
pub use checkpoint::{hash_weights, Checkpoint, TensorRecord, WeightsHash};
pub use container::{read_checkpoint, write_checkpoint};
pub use patch::{decode, encode, CodecId, SparsePatch, SparseRepresentation};
