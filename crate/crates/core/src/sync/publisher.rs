use std::thread;

use serde::Serialize;
use tracing::{debug, warn};

use super::manifest::{FileEntry, Manifest, ManifestKind, ManifestSigner};
use super::store::{ObjectStore, StoreError};
use super::{anchor_for, delta_key, full_key, manifest_key, ready_key, SyncError};
use crate::checkpoint::{Checkpoint, WeightsHash};
use crate::container::encode_checkpoint;
use crate::patch::{encode, patch_to_bytes, CodecId, SparseRepresentation};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PublishConfig {
    /// Anchor interval `k`.
    pub anchor_interval: u64,
    pub representation: SparseRepresentation,
    pub codec: CodecId,
    /// Attempts for FULL containers, manifests and ready markers.
    pub attempts: u32,
}

impl Default for PublishConfig {
    fn default() -> Self {
        Self {
            anchor_interval: 50,
            representation: SparseRepresentation::CooDownscaled,
            codec: CodecId::Zstd1,
            attempts: 3,
        }
    }
}

impl PublishConfig {
    fn validate(&self) -> Result<(), SyncError> {
        if self.anchor_interval == 0 {
            return Err(SyncError::InvalidArgument("anchor interval must be at least 1".into()));
        }
        if self.attempts == 0 {
            return Err(SyncError::InvalidArgument("attempts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishReport {
    pub step: u64,
    pub manifests: Vec<Manifest>,
    /// The delta upload failed and a FULL was published in its place.
    pub delta_fallback: bool,
    pub delta_bytes: Option<u64>,
    pub full_bytes: Option<u64>,
    pub changes: Option<usize>,
}

impl PublishReport {
    pub fn has(&self, kind: ManifestKind) -> bool {
        self.manifests.iter().any(|m| m.kind == kind)
    }
}

fn put_with_retry(store: &dyn ObjectStore, key: &str, bytes: &[u8], attempts: u32) -> Result<(), StoreError> {
    let mut last = None;
    for attempt in 1..=attempts {
        match store.put(key, bytes) {
            Ok(()) => return Ok(()),
            Err(e) => {
                warn!(key, attempt, error = %e, "upload failed");
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

fn upload_full(
    store: &dyn ObjectStore,
    signer: &ManifestSigner,
    checkpoint: &Checkpoint,
    hash: WeightsHash,
    attempts: u32,
) -> Result<Manifest, SyncError> {
    let step = checkpoint.step();
    let key = full_key(step);
    let bytes = encode_checkpoint(checkpoint);
    put_with_retry(store, &key, &bytes, attempts)?;
    debug!(step, bytes = bytes.len(), "uploaded full");
    let mut m = Manifest {
        step,
        kind: ManifestKind::Full,
        anchor_step: step,
        base_step: None,
        files: vec![FileEntry::for_bytes(key, &bytes)],
        weights_hash: hash,
        key_id: String::new(),
        signature: None,
    };
    signer.sign(&mut m);
    Ok(m)
}

fn finish(
    store: &dyn ObjectStore,
    step: u64,
    manifests: &[Manifest],
    attempts: u32,
) -> Result<(), SyncError> {
    let json = serde_json::to_vec_pretty(manifests).expect("manifests are always serializable");
    put_with_retry(store, &manifest_key(step), &json, attempts)?;
    put_with_retry(store, &ready_key(step), b"", attempts)?;
    Ok(())
}

/// Publishes `checkpoint` as a FULL-only step, e.g. the initial anchor.
pub fn publish_initial(
    checkpoint: &Checkpoint,
    store: &dyn ObjectStore,
    signer: &ManifestSigner,
    config: &PublishConfig,
) -> Result<PublishReport, SyncError> {
    config.validate()?;
    let m = upload_full(store, signer, checkpoint, checkpoint.hash(), config.attempts)?;
    let full_bytes = m.files[0].bytes;
    finish(store, checkpoint.step(), std::slice::from_ref(&m), config.attempts)?;
    Ok(PublishReport {
        step: checkpoint.step(),
        manifests: vec![m],
        delta_fallback: false,
        delta_bytes: None,
        full_bytes: Some(full_bytes),
        changes: None,
    })
}

/// Publishes step `t = current.step()`, which must follow `previous.step()`.
///
/// The delta is always uploaded; at anchor steps the FULL uploads on a
/// background thread at the same time. If the delta upload fails, a FULL is
/// published for this step instead. The ready marker is written only after
/// every referenced object and the manifest are stored. If a FULL cannot be
/// stored after all attempts the step is left without a ready marker and the
/// error is returned; publishing the same step again is safe.
pub fn publish_checkpoint(
    current: &Checkpoint,
    previous: &Checkpoint,
    store: &dyn ObjectStore,
    signer: &ManifestSigner,
    config: &PublishConfig,
) -> Result<PublishReport, SyncError> {
    config.validate()?;
    let t = current.step();
    if previous.step().checked_add(1) != Some(t) {
        return Err(SyncError::InvalidArgument(format!(
            "step {t} does not follow previous step {}",
            previous.step()
        )));
    }
    let k = config.anchor_interval;
    let anchor = anchor_for(t, k);
    let hash = current.hash();

    let patch = encode(current, previous, config.representation, config.codec)?.with_anchor(anchor);
    let changes = patch.num_changes();
    let delta_bytes = patch_to_bytes(&patch)?;

    let (delta_result, full_result) = thread::scope(|s| {
        let full = (t % k == 0).then(|| s.spawn(|| upload_full(store, signer, current, hash, config.attempts)));
        let delta = store.put(&delta_key(t), &delta_bytes);
        let full = full.map(|h| h.join().expect("full upload thread panicked"));
        (delta, full)
    });

    let mut manifests = Vec::with_capacity(2);
    let mut delta_fallback = false;
    match delta_result {
        Ok(()) => {
            let mut m = Manifest {
                step: t,
                kind: ManifestKind::Delta,
                anchor_step: anchor,
                base_step: Some(t - 1),
                files: vec![FileEntry::for_bytes(delta_key(t), &delta_bytes)],
                weights_hash: hash,
                key_id: String::new(),
                signature: None,
            };
            signer.sign(&mut m);
            manifests.push(m);
        }
        Err(e) => {
            warn!(step = t, error = %e, "delta upload failed, falling back to full");
            delta_fallback = true;
        }
    }
    let full = match full_result {
        Some(r) => Some(r?),
        None if delta_fallback => Some(upload_full(store, signer, current, hash, config.attempts)?),
        None => None,
    };
    let full_bytes = full.as_ref().map(|m| m.files[0].bytes);
    if let Some(m) = full {
        manifests.insert(0, m);
    }
    finish(store, t, &manifests, config.attempts)?;
    Ok(PublishReport {
        step: t,
        manifests,
        delta_fallback,
        delta_bytes: (!delta_fallback).then_some(delta_bytes.len() as u64),
        full_bytes,
        changes: Some(changes),
    })
}
