//! In-memory checkpoint model and the deterministic weights hash.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bf16::Bf16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}` has a zero extent in shape {shape:?}")]
    ZeroExtent { name: String, shape: Vec<usize> },
    #[error("tensor `{name}`: shape {shape:?} holds {expected} elements but data has {actual}")]
    ShapeLengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid weights hash `{0}`")]
    BadHash(String),
}

/// A named, shaped, row-major BF16 tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<Bf16>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<Bf16>) -> Result<Self, ModelError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ModelError::EmptyName);
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(ModelError::ZeroExtent { name, shape });
        }
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(ModelError::ShapeLengthMismatch {
                name,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Bf16] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Bf16] {
        &mut self.data
    }

    pub fn into_parts(self) -> (String, Vec<usize>, Vec<Bf16>) {
        (self.name, self.shape, self.data)
    }
}

/// Element count of a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Model weights at one optimizer step.
///
/// Tensors keep their insertion order; hashing and patching iterate in
/// ascending name order regardless.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    step: u64,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(step: u64, tensors: Vec<TensorRecord>) -> Result<Self, ModelError> {
        let mut seen = HashSet::with_capacity(tensors.len());
        for t in &tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(ModelError::DuplicateName(t.name.clone()));
            }
        }
        Ok(Self { step, tensors })
    }

    pub fn empty(step: u64) -> Self {
        Self { step, tensors: Vec::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn tensors(&self) -> &[TensorRecord] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [TensorRecord] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total number of parameters `d`.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(TensorRecord::len).sum()
    }

    /// Tensors in ascending lexicographic name order.
    pub fn sorted_tensors(&self) -> Vec<&TensorRecord> {
        let mut v: Vec<&TensorRecord> = self.tensors.iter().collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    /// Dense BF16 byte size.
    pub fn dense_bytes(&self) -> usize {
        self.num_elements() * 2
    }

    pub fn hash(&self) -> WeightsHash {
        hash_weights(self)
    }
}

/// SHA-256 over all weights in canonical order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightsHash(pub [u8; 32]);

impl WeightsHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, ModelError> {
        let bytes = hex::decode(s).map_err(|_| ModelError::BadHash(s.to_string()))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| ModelError::BadHash(s.to_string()))?;
        Ok(Self(arr))
    }
}

impl fmt::Display for WeightsHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for WeightsHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeightsHash({})", self.to_hex())
    }
}

impl FromStr for WeightsHash {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for WeightsHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for WeightsHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Hashes raw little-endian BF16 pairs, tensors in ascending name order and
/// elements in row-major order. Names and shapes are not part of the digest.
pub fn hash_weights(c: &Checkpoint) -> WeightsHash {
    let mut hasher = Sha256::new();
    let mut buf = Vec::with_capacity(64 * 1024);
    for t in c.sorted_tensors() {
        for chunk in t.data.chunks(32 * 1024) {
            buf.clear();
            buf.extend(chunk.iter().flat_map(|v| v.to_le_bytes()));
            hasher.update(&buf);
        }
    }
    WeightsHash(hasher.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(name: &str, vals: &[f64]) -> TensorRecord {
        TensorRecord::new(name, vec![vals.len()], vals.iter().map(|&v| Bf16::from_f64(v)).collect()).unwrap()
    }

    #[test]
    fn empty_checkpoint_hashes_empty_string() {
        let h = hash_weights(&Checkpoint::empty(0));
        assert_eq!(h.to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn known_digest_of_one_value() {
        // 1.0 in BF16 is 0x3F80, stored little-endian as [0x80, 0x3F].
        let c = Checkpoint::new(0, vec![t("w", &[1.0])]).unwrap();
        let expected = Sha256::digest([0x80u8, 0x3F]);
        assert_eq!(hash_weights(&c).0, <[u8; 32]>::from(expected));
    }

    #[test]
    fn hash_ignores_insertion_order() {
        let a = Checkpoint::new(1, vec![t("a", &[1.0, 2.0]), t("b", &[3.0])]).unwrap();
        let b = Checkpoint::new(1, vec![t("b", &[3.0]), t("a", &[1.0, 2.0])]).unwrap();
        assert_eq!(hash_weights(&a), hash_weights(&b));
    }

    #[test]
    fn low_bit_flip_changes_hash() {
        let a = Checkpoint::new(1, vec![t("a", &[1.0, 2.0])]).unwrap();
        let mut b = a.clone();
        let v = b.tensors_mut()[0].data_mut();
        v[1] = Bf16::from_bits(v[1].to_bits() ^ 1);
        assert_ne!(hash_weights(&a), hash_weights(&b));
        assert_eq!(hash_weights(&a), hash_weights(&a.clone()));
    }

    #[test]
    fn invariants_are_enforced() {
        assert_eq!(TensorRecord::new("", vec![1], vec![Bf16::ONE]), Err(ModelError::EmptyName));
        assert!(matches!(
            TensorRecord::new("x", vec![2, 2], vec![Bf16::ONE; 3]),
            Err(ModelError::ShapeLengthMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(TensorRecord::new("x", vec![0], vec![]), Err(ModelError::ZeroExtent { .. })));
        let scalar = TensorRecord::new("s", vec![], vec![Bf16::ONE]).unwrap();
        assert_eq!(scalar.len(), 1);
        assert_eq!(
            Checkpoint::new(0, vec![t("a", &[1.0]), t("a", &[2.0])]),
            Err(ModelError::DuplicateName("a".into()))
        );
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h = hash_weights(&Checkpoint::empty(0));
        assert_eq!(WeightsHash::from_hex(&h.to_hex()).unwrap(), h);
        assert!(WeightsHash::from_hex("abc").is_err());
    }
}
