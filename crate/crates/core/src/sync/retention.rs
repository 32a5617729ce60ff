use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use tracing::debug;

use super::manifest::{Manifest, ManifestKind};
use super::store::ObjectStore;
use super::{delta_key, full_key, manifest_key, ready_key, SyncError, CHECKPOINT_PREFIX, READY_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub max_deltas: usize,
    pub max_fulls: usize,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            max_deltas: 100,
            max_fulls: 10,
        }
    }
}

impl RetentionPolicy {
    pub fn new(max_deltas: usize, max_fulls: usize) -> Result<Self, SyncError> {
        if max_deltas == 0 || max_fulls == 0 {
            return Err(SyncError::InvalidArgument("retention limits must be positive".into()));
        }
        Ok(Self { max_deltas, max_fulls })
    }
}

/// Storage ceiling `max_fulls·F + max_deltas·D` when no anchor outside the
/// newest `max_fulls` is still referenced.
pub fn max_storage_bytes(policy: &RetentionPolicy, full_bytes: u64, delta_bytes: u64) -> u64 {
    policy.max_fulls as u64 * full_bytes + policy.max_deltas as u64 * delta_bytes
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RetentionReport {
    /// Deleted keys in deletion order.
    pub deleted: Vec<String>,
    pub deltas_deleted: usize,
    pub fulls_deleted: usize,
    pub deltas_retained: usize,
    pub fulls_retained: usize,
}

#[derive(Default)]
struct StepObjects {
    delta: bool,
    full: bool,
    manifest: bool,
    ready: bool,
}

fn newest(steps: &BTreeSet<u64>, n: usize) -> BTreeSet<u64> {
    steps.iter().rev().take(n).copied().collect()
}

/// Deletes DELTA objects beyond the newest `max_deltas` and FULL objects
/// beyond the newest `max_fulls`, keeping every FULL that a retained delta
/// names as its anchor. A step loses its ready marker (first) and manifest
/// (last) only when none of its objects survive. Running it again deletes
/// nothing.
pub fn apply_retention(store: &dyn ObjectStore, policy: &RetentionPolicy) -> Result<RetentionReport, SyncError> {
    let mut steps: BTreeMap<u64, StepObjects> = BTreeMap::new();
    for key in store.list(CHECKPOINT_PREFIX)? {
        let Some((step, file)) = key.strip_prefix(CHECKPOINT_PREFIX).and_then(|r| r.split_once('/')) else {
            continue;
        };
        let Ok(step) = step.parse::<u64>() else { continue };
        let e = steps.entry(step).or_default();
        match file {
            "delta.pulp" => e.delta = true,
            "full.pulc" => e.full = true,
            "manifest.json" => e.manifest = true,
            _ => {}
        }
    }
    for key in store.list(READY_PREFIX)? {
        if let Some(step) = key.strip_prefix(READY_PREFIX).and_then(|s| s.parse::<u64>().ok()) {
            steps.entry(step).or_default().ready = true;
        }
    }

    let delta_steps: BTreeSet<u64> = steps.iter().filter(|(_, o)| o.delta).map(|(&s, _)| s).collect();
    let full_steps: BTreeSet<u64> = steps.iter().filter(|(_, o)| o.full).map(|(&s, _)| s).collect();
    let keep_deltas = newest(&delta_steps, policy.max_deltas);
    let mut keep_fulls = newest(&full_steps, policy.max_fulls);
    for &d in &keep_deltas {
        let anchor = store
            .get(&manifest_key(d))
            .ok()
            .and_then(|b| serde_json::from_slice::<Vec<Manifest>>(&b).ok())
            .and_then(|ms| ms.into_iter().find(|m| m.kind == ManifestKind::Delta))
            .map(|m| m.anchor_step)
            // Unreadable manifest: keep the nearest earlier full to be safe.
            .or_else(|| full_steps.range(..d).next_back().copied());
        if let Some(a) = anchor.filter(|a| full_steps.contains(a)) {
            keep_fulls.insert(a);
        }
    }

    let mut report = RetentionReport {
        deltas_retained: keep_deltas.len(),
        fulls_retained: keep_fulls.len(),
        ..Default::default()
    };
    for (&step, objs) in &steps {
        let delta_kept = objs.delta && keep_deltas.contains(&step);
        let full_kept = objs.full && keep_fulls.contains(&step);
        let mut doomed = Vec::new();
        let retired = !delta_kept && !full_kept;
        if retired && objs.ready {
            doomed.push(ready_key(step));
        }
        if objs.delta && !delta_kept {
            doomed.push(delta_key(step));
            report.deltas_deleted += 1;
        }
        if objs.full && !full_kept {
            doomed.push(full_key(step));
            report.fulls_deleted += 1;
        }
        if retired && objs.manifest {
            doomed.push(manifest_key(step));
        }
        for key in doomed {
            store.delete(&key)?;
            report.deleted.push(key);
        }
    }
    debug!(deleted = report.deleted.len(), "retention applied");
    Ok(report)
}

/// Total bytes of all objects under the chain prefixes.
pub fn stored_bytes(store: &dyn ObjectStore) -> Result<u64, SyncError> {
    let mut total = 0;
    for prefix in [CHECKPOINT_PREFIX, READY_PREFIX] {
        for key in store.list(prefix)? {
            total += store.get(&key)?.len() as u64;
        }
    }
    Ok(total)
}
