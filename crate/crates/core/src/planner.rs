//! Bandwidth-aware transfer planning.
//!
//! Units throughout: bandwidth in bits per second, sizes in bytes,
//! `MB = 1e6` bytes and `GB = 1e9` bytes, throughputs in bytes per second.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patch::CodecId;

pub const MB: f64 = 1e6;
pub const GB: f64 = 1e9;
pub const MBIT: f64 = 1e6;
pub const GBIT: f64 = 1e9;

/// Published regime boundaries.
pub const LZ4_ABOVE_BPS: f64 = 800.0 * MBIT;
pub const ZSTD3_BELOW_BPS: f64 = 14.0 * MBIT;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("{what} must be positive (got {value})")]
    NonPositive { what: &'static str, value: f64 },
    #[error("profiles for {0} and {1} are identical in both ratio and codec time")]
    IdenticalProfiles(CodecId, CodecId),
    #[error("bandwidth grid is empty")]
    EmptyGrid,
    #[error("no compression profiles given")]
    NoProfiles,
}

fn positive(what: &'static str, value: f64) -> Result<f64, PlanError> {
    if value > 0.0 {
        Ok(value)
    } else {
        Err(PlanError::NonPositive { what, value })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionProfile {
    pub codec: CodecId,
    /// Sparse compression ratio `R`.
    pub ratio: f64,
    pub encode_bytes_per_sec: f64,
    pub decode_bytes_per_sec: f64,
}

impl CompressionProfile {
    pub fn new(codec: CodecId, ratio: f64, encode_mb_s: f64, decode_mb_s: f64) -> Self {
        Self {
            codec,
            ratio,
            encode_bytes_per_sec: encode_mb_s * MB,
            decode_bytes_per_sec: decode_mb_s * MB,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        positive("ratio", self.ratio)?;
        positive("encode throughput", self.encode_bytes_per_sec)?;
        positive("decode throughput", self.decode_bytes_per_sec)?;
        Ok(())
    }

    /// Seconds spent encoding and decoding `payload` bytes.
    pub fn codec_seconds(&self, payload: f64) -> f64 {
        payload / self.encode_bytes_per_sec + payload / self.decode_bytes_per_sec
    }
}

/// Reference profiles for a 7B model at ~99% sparsity with the default
/// representation.
pub fn default_profiles() -> Vec<CompressionProfile> {
    vec![
        CompressionProfile::new(CodecId::Lz4, 2.40, 830.0, 1484.0),
        CompressionProfile::new(CodecId::Zstd1, 3.33, 534.0, 851.0),
        CompressionProfile::new(CodecId::Zstd3, 3.40, 197.0, 670.0),
        CompressionProfile::new(CodecId::Gzip6, 3.32, 14.0, 192.0),
    ]
}

/// Uncompressed sparse payload of the reference 7B model, in bytes.
pub const REFERENCE_PAYLOAD_BYTES: f64 = 194.0 * MB;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub bandwidth_bps: f64,
    pub payload_bytes: f64,
}

/// `S/T_enc + 8·S/(R·B) + S/T_dec`.
pub fn total_transfer_time(profile: &CompressionProfile, link: &LinkModel) -> Result<f64, PlanError> {
    profile.validate()?;
    positive("bandwidth", link.bandwidth_bps)?;
    if link.payload_bytes < 0.0 {
        return Err(PlanError::NonPositive {
            what: "payload",
            value: link.payload_bytes,
        });
    }
    let s = link.payload_bytes;
    Ok(profile.codec_seconds(s) + s * 8.0 / (profile.ratio * link.bandwidth_bps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "bandwidth_bps", rename_all = "snake_case")]
pub enum Crossover {
    At(f64),
    /// One profile is at least as good at every bandwidth.
    None,
}

/// Bandwidth at which `a` and `b` take equal total time.
pub fn crossover_bandwidth(a: &CompressionProfile, b: &CompressionProfile, payload: f64) -> Result<Crossover, PlanError> {
    a.validate()?;
    b.validate()?;
    positive("payload", payload)?;
    let dt = a.codec_seconds(payload) - b.codec_seconds(payload);
    let dr = 1.0 / a.ratio - 1.0 / b.ratio;
    if dt == 0.0 && dr == 0.0 {
        return Err(PlanError::IdenticalProfiles(a.codec, b.codec));
    }
    if dt == 0.0 {
        return Ok(Crossover::None);
    }
    let bstar = payload * 8.0 * dr / -dt;
    Ok(if bstar > 0.0 && bstar.is_finite() {
        Crossover::At(bstar)
    } else {
        Crossover::None
    })
}

/// Published tiers: LZ4 above 800 Mb/s, ZSTD_3 below 14 Mb/s, ZSTD_1 in
/// between (boundaries inclusive).
pub fn select_codec(bandwidth_bps: f64) -> Result<CodecId, PlanError> {
    positive("bandwidth", bandwidth_bps)?;
    Ok(select_with_boundaries(bandwidth_bps, ZSTD3_BELOW_BPS, LZ4_ABOVE_BPS))
}

fn select_with_boundaries(bps: f64, low: f64, high: f64) -> CodecId {
    if bps > high {
        CodecId::Lz4
    } else if bps < low {
        CodecId::Zstd3
    } else {
        CodecId::Zstd1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegimeBoundaries {
    /// Below this ZSTD_3 wins over ZSTD_1.
    pub zstd3_below_bps: f64,
    /// Above this LZ4 wins over ZSTD_1.
    pub lz4_above_bps: f64,
}

/// Recomputes the tier boundaries from profiles via crossover bandwidths.
pub fn derive_boundaries(profiles: &[CompressionProfile], payload: f64) -> Result<RegimeBoundaries, PlanError> {
    let find = |c| profiles.iter().find(|p| p.codec == c).ok_or(PlanError::NoProfiles);
    let (lz4, z1, z3) = (find(CodecId::Lz4)?, find(CodecId::Zstd1)?, find(CodecId::Zstd3)?);
    let at = |c| match c {
        Crossover::At(b) => b,
        Crossover::None => f64::NAN,
    };
    Ok(RegimeBoundaries {
        zstd3_below_bps: at(crossover_bandwidth(z3, z1, payload)?),
        lz4_above_bps: at(crossover_bandwidth(z1, lz4, payload)?),
    })
}

pub fn select_codec_derived(bandwidth_bps: f64, bounds: &RegimeBoundaries) -> Result<CodecId, PlanError> {
    positive("bandwidth", bandwidth_bps)?;
    Ok(select_with_boundaries(bandwidth_bps, bounds.zstd3_below_bps, bounds.lz4_above_bps))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodecTime {
    pub codec: CodecId,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossoverEntry {
    pub from: CodecId,
    pub to: CodecId,
    pub bandwidth_bps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanReport {
    pub bandwidth_bps: f64,
    pub payload_bytes: f64,
    pub times: Vec<CodecTime>,
    /// Fastest profile at this bandwidth.
    pub chosen: CodecId,
    /// Codec of the published tier for this bandwidth.
    pub tier: CodecId,
    /// Crossovers between profiles adjacent in ratio order.
    pub crossovers: Vec<CrossoverEntry>,
}

pub fn plan(profiles: &[CompressionProfile], link: &LinkModel) -> Result<PlanReport, PlanError> {
    if profiles.is_empty() {
        return Err(PlanError::NoProfiles);
    }
    let mut times = Vec::with_capacity(profiles.len());
    for p in profiles {
        times.push(CodecTime {
            codec: p.codec,
            total_seconds: total_transfer_time(p, link)?,
        });
    }
    let chosen = times
        .iter()
        .min_by(|a, b| a.total_seconds.total_cmp(&b.total_seconds))
        .expect("non-empty")
        .codec;
    let mut by_ratio: Vec<&CompressionProfile> = profiles.iter().collect();
    by_ratio.sort_by(|a, b| b.ratio.total_cmp(&a.ratio));
    let mut crossovers = Vec::new();
    for w in by_ratio.windows(2) {
        let bandwidth_bps = match crossover_bandwidth(w[0], w[1], link.payload_bytes.max(f64::MIN_POSITIVE)) {
            Ok(Crossover::At(b)) => Some(b),
            _ => None,
        };
        crossovers.push(CrossoverEntry {
            from: w[0].codec,
            to: w[1].codec,
            bandwidth_bps,
        });
    }
    Ok(PlanReport {
        bandwidth_bps: link.bandwidth_bps,
        payload_bytes: link.payload_bytes,
        times,
        chosen,
        tier: select_codec(link.bandwidth_bps)?,
        crossovers,
    })
}

/// Fraction of wall time spent computing when each step waits for a full
/// payload transfer: `compute / (compute + 8·payload/B)`.
pub fn utilization(compute_seconds: f64, payload_bytes: f64, bandwidth_bps: f64) -> Result<f64, PlanError> {
    positive("compute time", compute_seconds)?;
    positive("bandwidth", bandwidth_bps)?;
    if payload_bytes < 0.0 {
        return Err(PlanError::NonPositive {
            what: "payload",
            value: payload_bytes,
        });
    }
    Ok(compute_seconds / (compute_seconds + payload_bytes * 8.0 / bandwidth_bps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UtilizationPoint {
    pub bandwidth_bps: f64,
    pub utilization: f64,
}

pub fn utilization_curve(compute_seconds: f64, payload_bytes: f64, grid: &[f64]) -> Result<Vec<UtilizationPoint>, PlanError> {
    if grid.is_empty() {
        return Err(PlanError::EmptyGrid);
    }
    grid.iter()
        .map(|&b| {
            Ok(UtilizationPoint {
                bandwidth_bps: b,
                utilization: utilization(compute_seconds, payload_bytes, b)?,
            })
        })
        .collect()
}

pub fn utilization_csv(points: &[UtilizationPoint]) -> String {
    let mut s = String::from("bandwidth_bps,utilization\n");
    for p in points {
        s.push_str(&format!("{},{:.6}\n", p.bandwidth_bps, p.utilization));
    }
    s
}

pub fn times_csv(times: &[CodecTime]) -> String {
    let mut s = String::from("codec,total_seconds\n");
    for t in times {
        s.push_str(&format!("{},{:.6}\n", t.codec, t.total_seconds));
    }
    s
}

/// Inputs to the analytic synchronization latency model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyScenario {
    pub bandwidth_bps: f64,
    /// Compressed size of one delta on the wire.
    pub delta_bytes: f64,
    /// Size of a full (anchor) checkpoint.
    pub full_bytes: f64,
    /// Deltas applied on the slow path.
    pub delta_count: u32,
    /// Codec profile used for decompression (payload = delta_bytes · ratio).
    pub profile: CompressionProfile,
    /// Uncompressed payload bytes applied per second.
    pub apply_bytes_per_sec: f64,
    /// Checkpoint bytes hashed per second.
    pub hash_bytes_per_sec: f64,
}

impl LatencyScenario {
    /// 7B model at 400 Mb/s with 108 MB zstd-1 deltas, a 14 GB anchor and a
    /// 9-delta recovery, on a host that applies ~1.2 GB/s of sparse payload
    /// and hashes 17.5 GB/s.
    pub fn reference() -> Self {
        Self {
            bandwidth_bps: 400.0 * MBIT,
            delta_bytes: 108.0 * MB,
            full_bytes: 14.0 * GB,
            delta_count: 9,
            profile: CompressionProfile::new(CodecId::Zstd1, 3.33, 534.0, 851.0),
            apply_bytes_per_sec: 1.2 * GB,
            hash_bytes_per_sec: 17.5 * GB,
        }
    }

    fn validate(&self) -> Result<(), PlanError> {
        positive("bandwidth", self.bandwidth_bps)?;
        positive("delta size", self.delta_bytes)?;
        positive("full size", self.full_bytes)?;
        positive("apply throughput", self.apply_bytes_per_sec)?;
        positive("hash throughput", self.hash_bytes_per_sec)?;
        self.profile.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTimes {
    pub full_download: f64,
    pub delta_download: f64,
    pub decompression: f64,
    pub application: f64,
    pub hash_verification: f64,
    pub total: f64,
}

impl PhaseTimes {
    fn finish(mut self) -> Self {
        self.total = self.full_download + self.delta_download + self.decompression + self.application + self.hash_verification;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub fast_path: PhaseTimes,
    pub slow_path: PhaseTimes,
    pub cold_start: PhaseTimes,
}

/// Analytic per-phase latency. The final hash is computed once over the full
/// checkpoint; downloads, decompression and application scale with the
/// number of deltas.
pub fn model_sync_latency(s: &LatencyScenario) -> Result<LatencyBreakdown, PlanError> {
    s.validate()?;
    let download = |bytes: f64| bytes * 8.0 / s.bandwidth_bps;
    let payload = s.delta_bytes * s.profile.ratio;
    let per_delta_decompress = payload / s.profile.decode_bytes_per_sec;
    let per_delta_apply = payload / s.apply_bytes_per_sec;
    let hash = s.full_bytes / s.hash_bytes_per_sec;
    let n = s.delta_count as f64;

    let fast_path = PhaseTimes {
        delta_download: download(s.delta_bytes),
        decompression: per_delta_decompress,
        application: per_delta_apply,
        hash_verification: hash,
        ..Default::default()
    }
    .finish();
    let slow_path = PhaseTimes {
        full_download: download(s.full_bytes),
        delta_download: n * download(s.delta_bytes),
        decompression: n * per_delta_decompress,
        application: n * per_delta_apply,
        hash_verification: hash,
        ..Default::default()
    }
    .finish();
    let cold_start = PhaseTimes {
        full_download: download(s.full_bytes),
        hash_verification: hash,
        ..Default::default()
    }
    .finish();
    Ok(LatencyBreakdown {
        fast_path,
        slow_path,
        cold_start,
    })
}
