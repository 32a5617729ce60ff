use std::collections::BTreeMap;
use std::sync::mpsc;
use std::thread;

use serde::Serialize;
use tracing::{debug, warn};

use super::manifest::{FileEntry, Manifest, ManifestKind, ManifestVerifier};
use super::store::{ObjectStore, StoreError};
use super::{latest_ready, manifest_key, SyncError};
use crate::checkpoint::{Checkpoint, WeightsHash};
use crate::container::decode_checkpoint;
use crate::patch::{apply_in_place, patch_from_bytes};

/// A node's local replica.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncState {
    step: u64,
    hash: WeightsHash,
    checkpoint: Checkpoint,
    anchor_step: Option<u64>,
}

impl SyncState {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Self {
            step: checkpoint.step(),
            hash: checkpoint.hash(),
            checkpoint,
            anchor_step: None,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn hash(&self) -> WeightsHash {
        self.hash
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    /// Anchor of the last slow-path rebuild, if any.
    pub fn anchor_step(&self) -> Option<u64> {
        self.anchor_step
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncPath {
    AlreadySynchronized,
    Fast,
    Slow,
}

#[derive(Clone, Debug)]
pub struct SyncOutcome {
    pub state: SyncState,
    pub path: SyncPath,
    pub deltas_applied: usize,
    pub fulls_fetched: usize,
    pub bytes_downloaded: u64,
    /// The fast path failed an integrity check and the slow path rebuilt.
    pub recovered: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyncOptions {
    /// Overlap the download of delta `t+1` with the application of delta `t`.
    pub pipelined: bool,
    /// When set, DELTA manifests must name `⌊t/k⌋·k` as their anchor.
    pub anchor_interval: Option<u64>,
}

impl Default for SyncOptions {
    fn default() -> Self {
        Self {
            pipelined: true,
            anchor_interval: None,
        }
    }
}

#[derive(Default)]
struct Counters {
    deltas: usize,
    fulls: usize,
    bytes: u64,
}

struct Reader<'a> {
    store: &'a dyn ObjectStore,
    verifier: &'a ManifestVerifier,
    opts: SyncOptions,
}

fn missing(e: StoreError, what: impl FnOnce() -> String) -> SyncError {
    match e {
        StoreError::NotFound(_) => SyncError::ProtocolViolation(what()),
        e => SyncError::Store(e),
    }
}

impl Reader<'_> {
    fn manifests(&self, step: u64) -> Result<Vec<Manifest>, SyncError> {
        let bytes = self
            .store
            .get(&manifest_key(step))
            .map_err(|e| missing(e, || format!("step {step} has no manifest")))?;
        let manifests: Vec<Manifest> = serde_json::from_slice(&bytes)
            .map_err(|e| SyncError::ProtocolViolation(format!("unreadable manifest at step {step}: {e}")))?;
        for m in &manifests {
            if !self.verifier.verify_signature(m) {
                return Err(SyncError::SignatureInvalid { step });
            }
            if m.step != step || m.files.len() != 1 {
                return Err(SyncError::ProtocolViolation(format!("malformed manifest at step {step}")));
            }
            m.check_linkage(self.opts.anchor_interval)
                .map_err(SyncError::ProtocolViolation)?;
        }
        Ok(manifests)
    }

    fn fetch(&self, step: u64, entry: &FileEntry) -> Result<Vec<u8>, SyncError> {
        let bytes = self
            .store
            .get(&entry.key)
            .map_err(|e| missing(e, || format!("object `{}` of step {step} is missing", entry.key)))?;
        if !entry.matches(&bytes) {
            return Err(SyncError::FileHashMismatch { key: entry.key.clone() });
        }
        Ok(bytes)
    }
}

fn find(ms: &[Manifest], kind: ManifestKind) -> Option<&Manifest> {
    ms.iter().find(|m| m.kind == kind)
}

fn check_hash(step: u64, expected: WeightsHash, cp: &Checkpoint) -> Result<WeightsHash, SyncError> {
    let actual = cp.hash();
    if actual != expected {
        return Err(SyncError::HashMismatch { step, expected, actual });
    }
    Ok(actual)
}

fn apply_delta(cp: &mut Checkpoint, m: &Manifest, bytes: &[u8]) -> Result<WeightsHash, SyncError> {
    let patch = patch_from_bytes(bytes)?;
    if patch.target_step != m.step || Some(patch.base_step) != m.base_step || patch.target_hash != m.weights_hash {
        return Err(SyncError::ProtocolViolation(format!(
            "patch header at step {} disagrees with its manifest",
            m.step
        )));
    }
    if cp.step() != patch.base_step {
        return Err(SyncError::ProtocolViolation(format!(
            "delta {} applies to step {} but replica is at {}",
            m.step,
            patch.base_step,
            cp.step()
        )));
    }
    apply_in_place(cp, &patch)?;
    check_hash(m.step, m.weights_hash, cp)
}

fn fast_path(r: &Reader, state: SyncState, latest: u64, n: &mut Counters) -> Result<Option<SyncState>, SyncError> {
    let ms = r.manifests(latest)?;
    let Some(m) = ms
        .iter()
        .find(|m| m.kind == ManifestKind::Delta && m.base_step == Some(state.step))
    else {
        // Fallback FULL at this step; the slow path fetches it directly.
        return Ok(None);
    };
    let bytes = r.fetch(latest, &m.files[0])?;
    n.bytes += bytes.len() as u64;
    n.deltas += 1;
    let mut cp = state.checkpoint;
    let hash = apply_delta(&mut cp, m, &bytes)?;
    Ok(Some(SyncState {
        step: latest,
        hash,
        checkpoint: cp,
        anchor_step: state.anchor_step,
    }))
}

fn slow_path(r: &Reader, latest: u64, n: &mut Counters) -> Result<SyncState, SyncError> {
    let latest_ms = r.manifests(latest)?;
    let anchor = match find(&latest_ms, ManifestKind::Full) {
        Some(_) => latest,
        None => {
            find(&latest_ms, ManifestKind::Delta)
                .ok_or_else(|| SyncError::ProtocolViolation(format!("step {latest} has no manifests")))?
                .anchor_step
        }
    };
    let mut window: BTreeMap<u64, Vec<Manifest>> = BTreeMap::new();
    window.insert(latest, latest_ms);
    for s in anchor..latest {
        window.insert(s, r.manifests(s)?);
    }
    // Start from the newest FULL in the window: the anchor, or a later
    // fallback published when a delta upload failed.
    let (start, full) = window
        .iter()
        .rev()
        .find_map(|(&s, ms)| find(ms, ManifestKind::Full).map(|m| (s, m.clone())))
        .ok_or_else(|| SyncError::ProtocolViolation(format!("anchor FULL at step {anchor} is missing")))?;
    debug!(anchor, start, latest, "slow path");

    let bytes = r.fetch(start, &full.files[0])?;
    n.bytes += bytes.len() as u64;
    n.fulls += 1;
    let mut cp = decode_checkpoint(&bytes)?;
    if cp.step() != start {
        return Err(SyncError::ProtocolViolation(format!(
            "FULL object at step {start} holds step {}",
            cp.step()
        )));
    }
    let mut hash = check_hash(start, full.weights_hash, &cp)?;

    let mut deltas = Vec::with_capacity((latest - start) as usize);
    for s in start + 1..=latest {
        let m = window[&s]
            .iter()
            .find(|m| m.kind == ManifestKind::Delta)
            .ok_or_else(|| SyncError::ProtocolViolation(format!("step {s} has no delta")))?;
        deltas.push(m.clone());
    }

    if r.opts.pipelined && deltas.len() > 1 {
        thread::scope(|scope| {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<u8>, SyncError>>(1);
            let deltas_ref = &deltas;
            scope.spawn(move || {
                for m in deltas_ref {
                    let item = r.fetch(m.step, &m.files[0]);
                    let stop = item.is_err();
                    if tx.send(item).is_err() || stop {
                        return;
                    }
                }
            });
            for m in &deltas {
                let bytes = rx.recv().expect("downloader sends one item per delta")?;
                n.bytes += bytes.len() as u64;
                n.deltas += 1;
                hash = apply_delta(&mut cp, m, &bytes)?;
            }
            Ok::<_, SyncError>(())
        })?;
    } else {
        for m in &deltas {
            let bytes = r.fetch(m.step, &m.files[0])?;
            n.bytes += bytes.len() as u64;
            n.deltas += 1;
            hash = apply_delta(&mut cp, m, &bytes)?;
        }
    }
    Ok(SyncState {
        step: latest,
        hash,
        checkpoint: cp,
        anchor_step: Some(start),
    })
}

pub fn synchronize(
    state: Option<SyncState>,
    store: &dyn ObjectStore,
    verifier: &ManifestVerifier,
) -> Result<SyncOutcome, SyncError> {
    synchronize_with(state, store, verifier, SyncOptions::default())
}

/// Brings `state` (or a fresh node when `None`) to the latest ready step.
///
/// One step behind takes the fast path. If that fails an integrity check the
/// local state is discarded and the slow path rebuilds from the anchor within
/// the same call. A returned state always matches the publisher's weights
/// hash for its step.
pub fn synchronize_with(
    state: Option<SyncState>,
    store: &dyn ObjectStore,
    verifier: &ManifestVerifier,
    opts: SyncOptions,
) -> Result<SyncOutcome, SyncError> {
    let latest = latest_ready(store)?.ok_or(SyncError::NothingPublished)?;
    let r = Reader { store, verifier, opts };
    let mut n = Counters::default();
    let outcome = |state, path, n: Counters, recovered| SyncOutcome {
        state,
        path,
        deltas_applied: n.deltas,
        fulls_fetched: n.fulls,
        bytes_downloaded: n.bytes,
        recovered,
    };

    match state {
        Some(s) if s.step == latest => Ok(outcome(s, SyncPath::AlreadySynchronized, n, false)),
        Some(s) if s.step > latest => Err(SyncError::ProtocolViolation(format!(
            "replica at step {} is ahead of latest ready step {latest}",
            s.step
        ))),
        Some(s) if s.step + 1 == latest => match fast_path(&r, s, latest, &mut n) {
            Ok(Some(s)) => Ok(outcome(s, SyncPath::Fast, n, false)),
            Ok(None) => {
                let s = slow_path(&r, latest, &mut n)?;
                Ok(outcome(s, SyncPath::Slow, n, false))
            }
            Err(e) if e.is_integrity() => {
                warn!(step = latest, error = %e, "fast path failed, rebuilding from anchor");
                n.deltas = 0;
                let s = slow_path(&r, latest, &mut n)?;
                Ok(outcome(s, SyncPath::Slow, n, true))
            }
            Err(e) => Err(e),
        },
        _ => {
            let s = slow_path(&r, latest, &mut n)?;
            Ok(outcome(s, SyncPath::Slow, n, false))
        }
    }
}
