use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("unknown codec id {0}")]
    UnknownId(u8),
    #[error("unknown codec name `{0}` (expected identity, lz4, zstd-1, zstd-3 or gzip-6)")]
    UnknownName(String),
    #[error("corrupt {codec} stream: {detail}")]
    Corrupt { codec: CodecId, detail: String },
}

/// General-purpose compressor applied to index and value streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CodecId {
    Identity = 0,
    Lz4 = 1,
    Zstd1 = 2,
    Zstd3 = 3,
    Gzip6 = 4,
}

impl CodecId {
    pub const ALL: [CodecId; 5] = [CodecId::Identity, CodecId::Lz4, CodecId::Zstd1, CodecId::Zstd3, CodecId::Gzip6];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self, CodecError> {
        Self::ALL.get(id as usize).copied().ok_or(CodecError::UnknownId(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            CodecId::Identity => "identity",
            CodecId::Lz4 => "lz4",
            CodecId::Zstd1 => "zstd-1",
            CodecId::Zstd3 => "zstd-3",
            CodecId::Gzip6 => "gzip-6",
        }
    }
}

impl fmt::Display for CodecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodecId {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .or(match norm.as_str() {
                "none" => Some(CodecId::Identity),
                "zstd" => Some(CodecId::Zstd1),
                "gzip" => Some(CodecId::Gzip6),
                _ => None,
            })
            .ok_or_else(|| CodecError::UnknownName(s.to_string()))
    }
}

impl TryFrom<String> for CodecId {
    type Error = CodecError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CodecId> for String {
    fn from(c: CodecId) -> String {
        c.name().to_string()
    }
}

// LZ4 block streams carry their decompressed size up front; a block expands
// at most ~255x, so larger claims are corrupt.
const LZ4_MAX_EXPANSION: usize = 256;

pub fn compress(bytes: &[u8], codec: CodecId) -> Vec<u8> {
    match codec {
        CodecId::Identity => bytes.to_vec(),
        CodecId::Lz4 => lz4_flex::block::compress_prepend_size(bytes),
        CodecId::Zstd1 => zstd::bulk::compress(bytes, 1).expect("in-memory zstd compression"),
        CodecId::Zstd3 => zstd::bulk::compress(bytes, 3).expect("in-memory zstd compression"),
        CodecId::Gzip6 => {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::new(6));
            enc.write_all(bytes).expect("in-memory gzip");
            enc.finish().expect("in-memory gzip")
        }
    }
}

pub fn decompress(bytes: &[u8], codec: CodecId) -> Result<Vec<u8>, CodecError> {
    let corrupt = |detail: String| CodecError::Corrupt { codec, detail };
    match codec {
        CodecId::Identity => Ok(bytes.to_vec()),
        CodecId::Lz4 => {
            let claimed = bytes
                .get(..4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| corrupt("missing size prefix".into()))?;
            if claimed > (bytes.len() - 4).saturating_mul(LZ4_MAX_EXPANSION) + 16 {
                return Err(corrupt(format!("implausible decompressed size {claimed}")));
            }
            lz4_flex::block::decompress_size_prepended(bytes).map_err(|e| corrupt(e.to_string()))
        }
        CodecId::Zstd1 | CodecId::Zstd3 => {
            let mut out = Vec::new();
            zstd::stream::read::Decoder::new(bytes)
                .and_then(|mut d| d.read_to_end(&mut out))
                .map_err(|e| corrupt(e.to_string()))?;
            Ok(out)
        }
        CodecId::Gzip6 => {
            let mut out = Vec::new();
            flate2::read::GzDecoder::new(bytes)
                .read_to_end(&mut out)
                .map_err(|e| corrupt(e.to_string()))?;
            Ok(out)
        }
    }
}
