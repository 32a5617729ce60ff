mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use common::*;
use sparsync::patch::{patch_from_bytes, patch_to_bytes};
use sparsync::sync::{
    apply_retention, delta_key, full_key, latest_ready, manifest_key, publish_checkpoint, ready_key,
    stored_bytes, synchronize, synchronize_with, FileEntry, LocalStore, Manifest, ManifestKind, ManifestSigner,
    MemoryStore, ObjectStore, RetentionPolicy, StoreError, SyncError, SyncOptions, SyncPath, SyncState,
};
use sparsync::Bf16;

#[test]
fn anchor_step_publishes_full_and_delta() {
    let store = MemoryStore::new();
    let c = chain(51, 1);
    let reports = publish_all(&store, &c, 50);
    assert!(reports[50].has(ManifestKind::Full) && reports[50].has(ManifestKind::Delta));
    assert!(store.get(&full_key(50)).is_ok() && store.get(&delta_key(50)).is_ok());
    assert_eq!(store.list("ready/50").unwrap(), ["ready/50"]);
    assert!(!reports[51].has(ManifestKind::Full));
    assert!(store.get(&full_key(51)).is_err());
    let ms: Vec<Manifest> = serde_json::from_slice(&store.get(&manifest_key(50)).unwrap()).unwrap();
    assert_eq!(ms.len(), 2);
    assert!(ms.iter().all(|m| m.anchor_step == 50 && m.weights_hash == c[50].hash()));
    assert!(ms.iter().all(|m| signer().verifier().verify_signature(m)));
}

#[test]
fn fresh_node_takes_slow_path_from_anchor() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(57, 2);
    publish_all(&store, &c, 50);
    store.clear_gets();
    let out = synchronize(None, &store, &signer().verifier()).unwrap();
    assert_eq!(out.path, SyncPath::Slow);
    assert_eq!(out.state.step(), 57);
    assert_eq!(out.state.hash(), c[57].hash());
    assert_eq!(out.state.checkpoint(), &c[57]);
    assert_eq!(out.state.anchor_step(), Some(50));
    assert_eq!(out.fulls_fetched, 1);
    assert_eq!(out.deltas_applied, 7);
    assert_eq!(store.gets_ending("full.pulc"), 1);
    assert!(store.gets().contains(&full_key(50)));
    assert_eq!(store.gets_ending("delta.pulp"), 7);
}

#[test]
fn one_step_behind_fetches_exactly_one_delta() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(11, 3);
    publish_all(&store, &c, 50);
    store.clear_gets();
    let out = synchronize(Some(SyncState::new(c[10].clone())), &store, &signer().verifier()).unwrap();
    assert_eq!(out.path, SyncPath::Fast);
    assert_eq!(out.state.hash(), c[11].hash());
    assert_eq!(out.deltas_applied, 1);
    assert_eq!(store.gets_ending("delta.pulp"), 1);
    assert_eq!(store.gets_ending("full.pulc"), 0);
    assert!(!out.recovered);
}

#[test]
fn synchronized_node_is_untouched() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(10, 4);
    publish_all(&store, &c, 50);
    store.clear_gets();
    let state = SyncState::new(c[10].clone());
    let out = synchronize(Some(state.clone()), &store, &signer().verifier()).unwrap();
    assert_eq!(out.path, SyncPath::AlreadySynchronized);
    assert_eq!(out.state, state);
    assert!(store.gets().is_empty());
}

#[test]
fn delta_upload_failure_falls_back_to_full() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(8, 5);
    let s = signer();
    let cfg = config(50);
    sparsync::sync::publish_initial(&c[0], &store, &s, &cfg).unwrap();
    for t in 1..=7 {
        if t == 7 {
            store.fail_put(&delta_key(7), 1);
        }
        let r = publish_checkpoint(&c[t], &c[t - 1], &store, &s, &cfg).unwrap();
        assert_eq!(r.delta_fallback, t == 7);
        assert_eq!(r.has(ManifestKind::Full), t == 7);
    }
    assert!(store.get(&delta_key(7)).is_err());
    assert!(store.get(&full_key(7)).is_ok());

    // Catching up from step 6 lands on the fallback FULL.
    let out = synchronize(Some(SyncState::new(c[6].clone())), &store, &s.verifier()).unwrap();
    assert_eq!((out.state.step(), out.state.hash()), (7, c[7].hash()));
    assert_eq!(out.fulls_fetched, 1);

    // A fresh node starts from the fallback rather than the anchor at 0.
    publish_checkpoint(&c[8], &c[7], &store, &s, &cfg).unwrap();
    let out = synchronize(None, &store, &s.verifier()).unwrap();
    assert_eq!(out.state.hash(), c[8].hash());
    assert_eq!(out.state.anchor_step(), Some(7));
    assert_eq!(out.deltas_applied, 1);
}

#[test]
fn full_upload_failure_leaves_step_unready() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(5, 6);
    let s = signer();
    let cfg = config(5);
    publish_all(&store, &c[..5], 5);
    store.fail_put(&full_key(5), 3);
    let err = publish_checkpoint(&c[5], &c[4], &store, &s, &cfg).unwrap_err();
    assert!(matches!(err, SyncError::Store(_)));
    assert_eq!(latest_ready(&store).unwrap(), Some(4));
    // Retrying succeeds once the store recovers.
    publish_checkpoint(&c[5], &c[4], &store, &s, &cfg).unwrap();
    let out = synchronize(None, &store, &s.verifier()).unwrap();
    assert_eq!(out.state.hash(), c[5].hash());

    // Two transient failures are absorbed by the retries.
    let store = Faulty::new(MemoryStore::new());
    publish_all(&store, &c[..5], 5);
    store.fail_put(&full_key(5), 2);
    assert!(publish_checkpoint(&c[5], &c[4], &store, &s, &cfg).is_ok());
}

#[test]
fn transient_corruption_recovers_via_slow_path() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(11, 7);
    publish_all(&store, &c, 5);
    store.corrupt_get(&delta_key(11), 1);
    let out = synchronize(Some(SyncState::new(c[10].clone())), &store, &signer().verifier()).unwrap();
    assert!(out.recovered);
    assert_eq!(out.path, SyncPath::Slow);
    assert_eq!(out.state.hash(), c[11].hash());
    assert_eq!(out.state.anchor_step(), Some(10));
}

/// Replaces one value in the delta at `step` and re-signs its manifest, as a
/// faulty publisher would.
fn corrupt_published_delta(store: &dyn ObjectStore, signer: &ManifestSigner, step: u64) {
    let mut patch = patch_from_bytes(&store.get(&delta_key(step)).unwrap()).unwrap();
    let v = &mut patch.tensors[0].values[0];
    *v = Bf16::from_bits(v.to_bits() ^ 0x0001);
    let bytes = patch_to_bytes(&patch).unwrap();
    store.put(&delta_key(step), &bytes).unwrap();
    let mut ms: Vec<Manifest> = serde_json::from_slice(&store.get(&manifest_key(step)).unwrap()).unwrap();
    for m in ms.iter_mut().filter(|m| m.kind == ManifestKind::Delta) {
        m.files = vec![FileEntry::for_bytes(delta_key(step), &bytes)];
        signer.sign(m);
    }
    store.put(&manifest_key(step), &serde_json::to_vec(&ms).unwrap()).unwrap();
}

#[test]
fn corrupted_value_payload_detected_by_weights_hash() {
    let store = MemoryStore::new();
    let c = chain(50, 8);
    publish_all(&store, &c, 50);
    let s = signer();
    corrupt_published_delta(&store, &s, 50);
    let out = synchronize(Some(SyncState::new(c[49].clone())), &store, &s.verifier()).unwrap();
    assert!(out.recovered);
    assert_eq!(out.state.hash(), c[50].hash());
    assert_eq!(out.fulls_fetched, 1);
}

#[test]
fn corrupted_local_state_recovers() {
    let store = MemoryStore::new();
    let c = chain(12, 9);
    publish_all(&store, &c, 10);
    // Right step, wrong weights.
    let wrong = chain(10, 99)[10].clone();
    let out = synchronize(Some(SyncState::new(wrong)), &store, &signer().verifier()).unwrap();
    assert!(!out.recovered && out.path == SyncPath::Slow);
    let wrong = chain(11, 99)[11].clone();
    let out = synchronize(Some(SyncState::new(wrong)), &store, &signer().verifier()).unwrap();
    assert!(out.recovered);
    assert_eq!(out.state.hash(), c[12].hash());
}

#[test]
fn persistent_corruption_inside_window_is_reported() {
    let store = Faulty::new(MemoryStore::new());
    let c = chain(8, 10);
    publish_all(&store, &c, 50);
    store.corrupt_get(&delta_key(5), usize::MAX);
    let err = synchronize(None, &store, &signer().verifier()).unwrap_err();
    assert!(matches!(err, SyncError::FileHashMismatch { .. }), "{err}");
}

#[test]
fn missing_object_is_protocol_violation() {
    let store = MemoryStore::new();
    let c = chain(57, 11);
    publish_all(&store, &c, 50);
    store.delete(&delta_key(53)).unwrap();
    let err = synchronize(None, &store, &signer().verifier()).unwrap_err();
    assert!(matches!(err, SyncError::ProtocolViolation(_)), "{err}");
    store.delete(&manifest_key(57)).unwrap();
    let err = synchronize(Some(SyncState::new(c[56].clone())), &store, &signer().verifier()).unwrap_err();
    assert!(matches!(err, SyncError::ProtocolViolation(_)), "{err}");
}

#[test]
fn foreign_signature_is_rejected() {
    let store = MemoryStore::new();
    let c = chain(3, 12);
    publish_all(&store, &c, 50);
    let other = ManifestSigner::from_seed([7; 32]).verifier();
    let err = synchronize(None, &store, &other).unwrap_err();
    assert!(matches!(err, SyncError::SignatureInvalid { .. }));
}

#[test]
fn empty_store_and_outage() {
    let store = Faulty::new(MemoryStore::new());
    assert!(matches!(
        synchronize(None, &store, &signer().verifier()),
        Err(SyncError::NothingPublished)
    ));
    store.set_unreachable(true);
    assert!(matches!(
        synchronize(None, &store, &signer().verifier()),
        Err(SyncError::Store(StoreError::Unreachable(_)))
    ));
}

#[test]
fn pipelining_does_not_change_result() {
    let store = MemoryStore::new();
    let c = chain(30, 13);
    publish_all(&store, &c, 50);
    let v = signer().verifier();
    let a = synchronize_with(None, &store, &v, SyncOptions { pipelined: true, anchor_interval: Some(50) }).unwrap();
    let b = synchronize_with(None, &store, &v, SyncOptions { pipelined: false, anchor_interval: None }).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.deltas_applied, 30);
    assert_eq!(a.bytes_downloaded, b.bytes_downloaded);
    // A wrong expected interval is flagged.
    let err = synchronize_with(None, &store, &v, SyncOptions { pipelined: true, anchor_interval: Some(7) }).unwrap_err();
    assert!(matches!(err, SyncError::ProtocolViolation(_)));
}

#[test]
fn every_step_reachable_in_chain() {
    let store = MemoryStore::new();
    let c = chain(25, 14);
    let s = signer();
    let cfg = config(4);
    sparsync::sync::publish_initial(&c[0], &store, &s, &cfg).unwrap();
    let mut state = Some(SyncState::new(c[0].clone()));
    for t in 1..c.len() {
        publish_checkpoint(&c[t], &c[t - 1], &store, &s, &cfg).unwrap();
        let out = synchronize(state, &store, &s.verifier()).unwrap();
        assert_eq!(out.path, SyncPath::Fast);
        assert_eq!(out.state.hash(), c[t].hash());
        state = Some(out.state);
    }
}

#[test]
fn readers_never_see_incomplete_steps() {
    let dir = tempfile::tempdir().unwrap();
    let store = LocalStore::new(dir.path()).unwrap();
    let c = chain(40, 15);
    let hashes: Vec<_> = c.iter().map(|x| x.hash()).collect();
    let done = AtomicBool::new(false);
    thread::scope(|scope| {
        let reader = scope.spawn(|| {
            let r = LocalStore::new(dir.path()).unwrap();
            let v = signer().verifier();
            let mut state = None;
            let mut syncs = 0;
            while !done.load(Ordering::Acquire) {
                match synchronize(state.clone(), &r, &v) {
                    Ok(out) => {
                        assert_eq!(out.state.hash(), hashes[out.state.step() as usize]);
                        state = Some(out.state);
                        syncs += 1;
                    }
                    Err(SyncError::NothingPublished) => {}
                    Err(e) => panic!("reader observed {e}"),
                }
            }
            syncs
        });
        publish_all(&store, &c, 8);
        done.store(true, Ordering::Release);
        assert!(reader.join().unwrap() > 0);
    });
}

#[test]
fn local_store_lists_published_steps() {
    let dir = tempfile::tempdir().unwrap();
    let store = LocalStore::new(dir.path()).unwrap();
    let c = chain(3, 16);
    let s = signer();
    for t in 1..=3 {
        publish_checkpoint(&c[t], &c[t - 1], &store, &s, &config(50)).unwrap();
    }
    let keys = store.list("checkpoints/").unwrap();
    assert_eq!(steps_with(&keys), [1, 2, 3].into());
    assert_eq!(keys.len(), 6);
    assert!(matches!(store.get("checkpoints/9/delta.pulp"), Err(StoreError::NotFound(_))));
}

#[test]
fn retention_under_limits_deletes_nothing() {
    let store = MemoryStore::new();
    publish_all(&store, &chain(5, 17), 50);
    let r = apply_retention(&store, &RetentionPolicy::default()).unwrap();
    assert!(r.deleted.is_empty());
    assert_eq!((r.deltas_retained, r.fulls_retained), (5, 1));
}

#[test]
fn retention_of_long_chain() {
    let store = MemoryStore::new();
    let c = chain(120, 18);
    publish_all(&store, &c, 10);
    let before = store.len();
    let r = apply_retention(&store, &RetentionPolicy::default()).unwrap();
    assert_eq!(r.deltas_deleted, 20);
    assert_eq!(r.fulls_deleted, 2);
    assert_eq!(r.deleted.len(), 62);
    assert_eq!(store.len(), before - 62);
    for t in 1..=20 {
        assert!(store.get(&delta_key(t)).is_err());
    }
    assert!(store.get(&full_key(0)).is_err() && store.get(&full_key(10)).is_err());
    // Anchor of the oldest retained delta survives beyond the newest ten.
    assert!(store.get(&full_key(20)).is_ok());
    for t in 21..=120u64 {
        assert!(store.get(&delta_key(t)).is_ok());
        assert!(store.get(&full_key(t / 10 * 10)).is_ok());
        assert!(store.get(&ready_key(t)).is_ok());
    }
    assert!(store.get(&ready_key(20)).is_ok());
    assert!(store.get(&ready_key(19)).is_err());
    // Ready markers go before objects.
    let pos = |k: &str| r.deleted.iter().position(|d| d == k).unwrap();
    assert!(pos(&ready_key(5)) < pos(&delta_key(5)));
    assert!(pos(&delta_key(5)) < pos(&manifest_key(5)));

    assert!(apply_retention(&store, &RetentionPolicy::default()).unwrap().deleted.is_empty());
    let out = synchronize(None, &store, &signer().verifier()).unwrap();
    assert_eq!(out.state.hash(), c[120].hash());
}

#[test]
fn retention_bound_at_defaults() {
    let store = MemoryStore::new();
    let reports = publish_all(&store, &chain(120, 19), 50);
    apply_retention(&store, &RetentionPolicy::default()).unwrap();
    let f = reports.iter().filter_map(|r| r.full_bytes).max().unwrap();
    let d = reports.iter().filter_map(|r| r.delta_bytes).max().unwrap();
    // Manifests and markers are not part of the bound.
    let mut objects = 0;
    for k in store.list("checkpoints/").unwrap() {
        if !k.ends_with("manifest.json") {
            objects += store.get(&k).unwrap().len() as u64;
        }
    }
    assert!(objects <= 10 * f + 100 * d);
    assert!(stored_bytes(&store).unwrap() > objects);
}
