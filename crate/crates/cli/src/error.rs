use sparsync::analysis::AnalysisError;
use sparsync::container::ContainerError;
use sparsync::patch::PatchError;
use sparsync::planner::PlanError;
use sparsync::synth::SynthError;
use sparsync::sync::{SignerError, StoreError, SyncError};
use thiserror::Error;

use crate::units::UnitError;

/// Process exit codes. 2 is reserved for argument errors reported by clap.
pub mod exit {
    pub const GENERIC: u8 = 1;
    pub const STORE_UNREACHABLE: u8 = 3;
    pub const SIGNATURE_INVALID: u8 = 4;
    pub const HASH_MISMATCH: u8 = 5;
    pub const PROTOCOL_VIOLATION: u8 = 6;
    pub const INVALID_INPUT: u8 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Config(String),
    #[error("hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Sync(SyncError::Store(e))
    }
}

impl From<SignerError> for CliError {
    fn from(e: SignerError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Sync(e) => match e {
                SyncError::Store(StoreError::NotFound(_)) => exit::PROTOCOL_VIOLATION,
                SyncError::Store(StoreError::InvalidKey(_)) => exit::INVALID_INPUT,
                SyncError::Store(_) => exit::STORE_UNREACHABLE,
                SyncError::SignatureInvalid { .. } | SyncError::Signer(_) => exit::SIGNATURE_INVALID,
                SyncError::HashMismatch { .. } | SyncError::FileHashMismatch { .. } => exit::HASH_MISMATCH,
                SyncError::ProtocolViolation(_) | SyncError::NothingPublished => exit::PROTOCOL_VIOLATION,
                SyncError::InvalidArgument(_) | SyncError::Patch(_) | SyncError::Container(_) => exit::INVALID_INPUT,
            },
            CliError::Patch(PatchError::HashMismatch { .. }) | CliError::HashMismatch { .. } => exit::HASH_MISMATCH,
            CliError::Patch(_)
            | CliError::Container(_)
            | CliError::Unit(_)
            | CliError::Analysis(_)
            | CliError::Plan(_)
            | CliError::Synth(_)
            | CliError::Input(_)
            | CliError::Config(_) => exit::INVALID_INPUT,
            CliError::Io(_) => exit::GENERIC,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsync::WeightsHash;

    #[test]
    fn codes_are_distinct_per_family() {
        let h = WeightsHash([0; 32]);
        let cases = [
            (CliError::from(StoreError::Unreachable("x".into())), 3),
            (SyncError::SignatureInvalid { step: 1 }.into(), 4),
            (SyncError::HashMismatch { step: 1, expected: h, actual: h }.into(), 5),
            (PatchError::HashMismatch { expected: h, actual: h }.into(), 5),
            (SyncError::ProtocolViolation("x".into()).into(), 6),
            (SyncError::NothingPublished.into(), 6),
            (CliError::Input("x".into()), 7),
            (std::io::Error::other("x").into(), 1),
        ];
        for (e, code) in cases {
            assert_eq!(e.exit_code(), code, "{e}");
        }
    }
}
