#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use sparsync::sync::{
    publish_checkpoint, publish_initial, ManifestSigner, ObjectStore, PublishConfig, PublishReport, StoreError,
};
use sparsync::synth::{generate_chain, SyntheticSpec};
use sparsync::Checkpoint;

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec::new(vec![vec![24, 16], vec![40]], 0.95, 4, seed)
}

pub fn chain(steps: usize, seed: u64) -> Vec<Checkpoint> {
    generate_chain(&small_spec(seed), steps).unwrap()
}

pub fn signer() -> ManifestSigner {
    ManifestSigner::from_seed([42; 32])
}

pub fn config(k: u64) -> PublishConfig {
    PublishConfig {
        anchor_interval: k,
        ..Default::default()
    }
}

/// Publishes `chain[0]` as the initial FULL and every later entry as a step.
pub fn publish_all(store: &dyn ObjectStore, chain: &[Checkpoint], k: u64) -> Vec<PublishReport> {
    let s = signer();
    let cfg = config(k);
    let mut reports = vec![publish_initial(&chain[0], store, &s, &cfg).unwrap()];
    for w in chain.windows(2) {
        reports.push(publish_checkpoint(&w[1], &w[0], store, &s, &cfg).unwrap());
    }
    reports
}

/// Store wrapper that records reads and injects failures.
pub struct Faulty<S> {
    pub inner: S,
    fail_puts: Mutex<HashMap<String, usize>>,
    corrupt_gets: Mutex<HashMap<String, usize>>,
    gets: Mutex<Vec<String>>,
    unreachable: Mutex<bool>,
}

impl<S: ObjectStore> Faulty<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            fail_puts: Mutex::default(),
            corrupt_gets: Mutex::default(),
            gets: Mutex::default(),
            unreachable: Mutex::new(false),
        }
    }

    /// The next `times` puts to `key` fail.
    pub fn fail_put(&self, key: &str, times: usize) {
        self.fail_puts.lock().unwrap().insert(key.to_string(), times);
    }

    /// The next `times` gets of `key` return bytes with the last byte flipped.
    pub fn corrupt_get(&self, key: &str, times: usize) {
        self.corrupt_gets.lock().unwrap().insert(key.to_string(), times);
    }

    pub fn set_unreachable(&self, down: bool) {
        *self.unreachable.lock().unwrap() = down;
    }

    pub fn gets(&self) -> Vec<String> {
        self.gets.lock().unwrap().clone()
    }

    pub fn gets_ending(&self, suffix: &str) -> usize {
        self.gets().iter().filter(|k| k.ends_with(suffix)).count()
    }

    pub fn clear_gets(&self) {
        self.gets.lock().unwrap().clear();
    }

    fn down(&self) -> Result<(), StoreError> {
        if *self.unreachable.lock().unwrap() {
            return Err(StoreError::Unreachable("injected outage".into()));
        }
        Ok(())
    }
}

fn take(map: &Mutex<HashMap<String, usize>>, key: &str) -> bool {
    let mut m = map.lock().unwrap();
    match m.get_mut(key) {
        Some(n) if *n > 0 => {
            *n -= 1;
            true
        }
        _ => false,
    }
}

impl<S: ObjectStore> ObjectStore for Faulty<S> {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.down()?;
        if take(&self.fail_puts, key) {
            return Err(StoreError::Backend(format!("injected put failure for {key}")));
        }
        self.inner.put(key, bytes)
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.down()?;
        self.gets.lock().unwrap().push(key.to_string());
        let mut b = self.inner.get(key)?;
        if take(&self.corrupt_gets, key) {
            if let Some(last) = b.last_mut() {
                *last ^= 0x5A;
            }
        }
        Ok(b)
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        self.down()?;
        self.inner.list(prefix)
    }

    fn delete(&self, key: &str) -> Result<(), StoreError> {
        self.down()?;
        self.inner.delete(key)
    }
}

pub fn step_of(key: &str) -> Option<u64> {
    key.split('/').nth(1)?.parse().ok()
}

pub fn steps_with(keys: &[String]) -> HashSet<u64> {
    keys.iter().filter_map(|k| step_of(k)).collect()
}
