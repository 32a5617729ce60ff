//! Anchored checkpoint chain over an object store.
//!
//! Every `k` steps the publisher uploads a FULL container (the anchor); every
//! step it uploads a DELTA patch against the previous step. Object layout:
//!
//! ```text
//! checkpoints/{t}/manifest.json   signed manifests for step t (JSON array)
//! checkpoints/{t}/full.pulc       FULL container, anchor steps and fallbacks
//! checkpoints/{t}/delta.pulp      DELTA patch from t-1 to t
//! ready/{t}                       zero-byte marker, written last
//! ```
//!
//! Consumers poll the highest ready marker and either apply one delta (fast
//! path) or rebuild from the nearest anchor (slow path).

mod consumer;
mod manifest;
mod publisher;
mod retention;
mod s3;
mod store;

use thiserror::Error;

use crate::checkpoint::WeightsHash;
use crate::container::ContainerError;
use crate::patch::PatchError;

pub use consumer::{synchronize, synchronize_with, SyncOptions, SyncOutcome, SyncPath, SyncState};
pub use manifest::{
    sha256_hex, verify_manifest, FileEntry, Manifest, ManifestKind, ManifestSigner, ManifestVerifier, SignerError,
};
pub use publisher::{publish_checkpoint, publish_initial, PublishConfig, PublishReport};
pub use retention::{apply_retention, max_storage_bytes, stored_bytes, RetentionPolicy, RetentionReport};
pub use s3::{S3Config, S3Store};
pub use store::{LocalStore, MemoryStore, ObjectStore, StoreError};

pub const CHECKPOINT_PREFIX: &str = "checkpoints/";
pub const READY_PREFIX: &str = "ready/";

pub fn manifest_key(step: u64) -> String {
    format!("{CHECKPOINT_PREFIX}{step}/manifest.json")
}

pub fn full_key(step: u64) -> String {
    format!("{CHECKPOINT_PREFIX}{step}/full.pulc")
}

pub fn delta_key(step: u64) -> String {
    format!("{CHECKPOINT_PREFIX}{step}/delta.pulp")
}

pub fn ready_key(step: u64) -> String {
    format!("{READY_PREFIX}{step}")
}

/// Anchor step for `step`: `⌊step/k⌋·k`.
pub fn anchor_for(step: u64, k: u64) -> u64 {
    step / k * k
}

/// Highest step with a ready marker, if any.
pub fn latest_ready(store: &dyn ObjectStore) -> Result<Option<u64>, StoreError> {
    Ok(store
        .list(READY_PREFIX)?
        .iter()
        .filter_map(|k| k.strip_prefix(READY_PREFIX)?.parse::<u64>().ok())
        .max())
}

#[derive(Debug, Error)]
pub enum SyncError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("weights hash mismatch at step {step}: expected {expected}, got {actual}")]
    HashMismatch {
        step: u64,
        expected: WeightsHash,
        actual: WeightsHash,
    },
    #[error("file hash mismatch for `{key}`")]
    FileHashMismatch { key: String },
    #[error("manifest signature invalid at step {step}")]
    SignatureInvalid { step: u64 },
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("nothing has been published yet")]
    NothingPublished,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Signer(#[from] SignerError),
    #[error(transparent)]
    Patch(PatchError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

impl From<PatchError> for SyncError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::HashMismatch { expected, actual } => SyncError::HashMismatch {
                step: 0,
                expected,
                actual,
            },
            e => SyncError::Patch(e),
        }
    }
}

impl SyncError {
    /// Damaged or inconsistent data that a rebuild from the anchor may fix.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            SyncError::HashMismatch { .. }
                | SyncError::FileHashMismatch { .. }
                | SyncError::Patch(_)
                | SyncError::Container(_)
        )
    }
}
