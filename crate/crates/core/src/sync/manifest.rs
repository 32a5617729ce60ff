use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::WeightsHash;

#[derive(Debug, Error)]
pub enum SignerError {
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("manifest serialization failed: {0}")]
    Serialize(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ManifestKind {
    Full,
    Delta,
}

impl fmt::Display for ManifestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ManifestKind::Full => "FULL",
            ManifestKind::Delta => "DELTA",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub key: String,
    pub bytes: u64,
    /// Lowercase hex SHA-256 of the object bytes.
    pub sha256: String,
}

impl FileEntry {
    pub fn for_bytes(key: impl Into<String>, data: &[u8]) -> Self {
        Self {
            key: key.into(),
            bytes: data.len() as u64,
            sha256: sha256_hex(data),
        }
    }

    pub fn matches(&self, data: &[u8]) -> bool {
        data.len() as u64 == self.bytes && sha256_hex(data) == self.sha256
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    pub kind: ManifestKind,
    pub anchor_step: u64,
    /// Step the delta applies to (`step - 1`); absent for FULL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_step: Option<u64>,
    pub files: Vec<FileEntry>,
    pub weights_hash: WeightsHash,
    pub key_id: String,
    /// Base64 Ed25519 signature over [`Manifest::canonical_bytes`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
}

impl Manifest {
    /// Compact JSON with sorted keys and the signature field removed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut unsigned = self.clone();
        unsigned.signature = None;
        // serde_json's default map is ordered, so keys come out sorted.
        let value = serde_json::to_value(&unsigned).expect("manifest is always serializable");
        serde_json::to_vec(&value).expect("value is always serializable")
    }

    pub fn file(&self, key: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.key == key)
    }

    /// Structural invariants of a signed chain record for interval `k`.
    pub fn check_linkage(&self, k: Option<u64>) -> Result<(), String> {
        match self.kind {
            ManifestKind::Full if self.anchor_step != self.step => {
                Err(format!("FULL manifest at {} names anchor {}", self.step, self.anchor_step))
            }
            ManifestKind::Full if self.base_step.is_some() => Err(format!("FULL manifest at {} has a base", self.step)),
            ManifestKind::Delta if self.step == 0 || self.base_step != Some(self.step - 1) => {
                Err(format!("DELTA manifest at {} has base {:?}", self.step, self.base_step))
            }
            ManifestKind::Delta if self.anchor_step > self.step => {
                Err(format!("DELTA manifest at {} names anchor {}", self.step, self.anchor_step))
            }
            ManifestKind::Delta if k.is_some_and(|k| self.anchor_step != super::anchor_for(self.step, k)) => {
                Err(format!("DELTA manifest at {} names anchor {}", self.step, self.anchor_step))
            }
            _ => Ok(()),
        }
    }
}

pub fn key_id(key: &VerifyingKey) -> String {
    hex::encode(&Sha256::digest(key.as_bytes())[..8])
}

pub struct ManifestSigner {
    key: SigningKey,
}

impl fmt::Debug for ManifestSigner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManifestSigner").field("key_id", &self.key_id()).finish()
    }
}

impl ManifestSigner {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate() -> Self {
        Self::from_seed(rand::random())
    }

    /// Parses the 32-byte secret seed as hex (surrounding whitespace allowed).
    pub fn from_hex(s: &str) -> Result<Self, SignerError> {
        let bytes = hex::decode(s.trim()).map_err(|e| SignerError::InvalidKey(e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| SignerError::InvalidKey("secret key must be 32 bytes".into()))?;
        Ok(Self::from_seed(seed))
    }

    pub fn secret_hex(&self) -> String {
        hex::encode(self.key.to_bytes())
    }

    pub fn verifier(&self) -> ManifestVerifier {
        ManifestVerifier {
            key: self.key.verifying_key(),
        }
    }

    pub fn key_id(&self) -> String {
        key_id(&self.key.verifying_key())
    }

    /// Sets `key_id` and `signature`.
    pub fn sign(&self, manifest: &mut Manifest) {
        manifest.key_id = self.key_id();
        let sig = self.key.sign(&manifest.canonical_bytes());
        manifest.signature = Some(BASE64.encode(sig.to_bytes()));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestVerifier {
    key: VerifyingKey,
}

impl ManifestVerifier {
    pub fn from_hex(s: &str) -> Result<Self, SignerError> {
        let bytes = hex::decode(s.trim()).map_err(|e| SignerError::InvalidKey(e.to_string()))?;
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| SignerError::InvalidKey("public key must be 32 bytes".into()))?;
        let key = VerifyingKey::from_bytes(&bytes).map_err(|e| SignerError::InvalidKey(e.to_string()))?;
        Ok(Self { key })
    }

    pub fn public_hex(&self) -> String {
        hex::encode(self.key.as_bytes())
    }

    pub fn key_id(&self) -> String {
        key_id(&self.key)
    }

    pub fn verify_signature(&self, manifest: &Manifest) -> bool {
        let Some(sig) = manifest.signature.as_deref() else {
            return false;
        };
        let Ok(bytes) = BASE64.decode(sig) else {
            return false;
        };
        let Ok(sig) = Signature::from_slice(&bytes) else {
            return false;
        };
        manifest.key_id == self.key_id() && self.key.verify(&manifest.canonical_bytes(), &sig).is_ok()
    }
}

/// True iff the signature is valid and every listed file is present in
/// `files` with matching length and SHA-256.
pub fn verify_manifest(manifest: &Manifest, files: &BTreeMap<String, Vec<u8>>, verifier: &ManifestVerifier) -> bool {
    verifier.verify_signature(manifest)
        && manifest
            .files
            .iter()
            .all(|f| files.get(&f.key).is_some_and(|data| f.matches(data)))
}
