use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use sparsync::planner::{
    default_profiles, derive_boundaries, model_sync_latency, plan as plan_report, utilization, utilization_csv, utilization_curve,
    CompressionProfile, LatencyScenario, LinkModel, PhaseTimes, REFERENCE_PAYLOAD_BYTES,
};
use sparsync::CodecId;

use crate::error::CliError;
use crate::units::{format_bandwidth, parse_bandwidth, parse_duration, parse_size};
use crate::Report;

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Link bandwidth, e.g. `100Mbit`, `20.16Gbit` or `50MB/s`.
    #[arg(long, value_parser = parse_bandwidth)]
    bandwidth: Option<f64>,
    /// Uncompressed payload per transfer, e.g. `194MB` or `14GB`.
    #[arg(long, value_parser = parse_size)]
    payload: Option<f64>,
    /// Compute time per step, e.g. `50s`.
    #[arg(long, value_parser = parse_duration)]
    compute: Option<f64>,
    /// TOML file with `[[profiles]]` entries (codec, ratio, encode_mb_s, decode_mb_s).
    #[arg(long, value_name = "FILE")]
    profiles: Option<PathBuf>,
    /// Emit the utilization curve as CSV (needs --compute).
    #[arg(long, requires = "compute")]
    curve: bool,
    /// Comma-separated bandwidths for --curve.
    #[arg(long, value_delimiter = ',', value_parser = parse_bandwidth, requires = "curve")]
    grid: Vec<f64>,
    /// Also print the modelled synchronization latency.
    #[arg(long)]
    latency: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    profiles: Vec<ProfileEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileEntry {
    codec: CodecId,
    ratio: f64,
    encode_mb_s: f64,
    decode_mb_s: f64,
}

fn load_profiles(path: &Path) -> Result<Vec<CompressionProfile>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let f: ProfileFile = toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let profiles: Vec<_> = f
        .profiles
        .into_iter()
        .map(|p| CompressionProfile::new(p.codec, p.ratio, p.encode_mb_s, p.decode_mb_s))
        .collect();
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

/// 10 Mbit/s to 100 Gbit/s, three points per decade.
fn default_grid() -> Vec<f64> {
    (0..=12).map(|i| 1e7 * 10f64.powf(i as f64 / 3.0)).collect()
}

fn phases(name: &str, p: &PhaseTimes) -> String {
    format!(
        "{name:<11} {:>9.2} s  (full {:.2}, deltas {:.2}, decompress {:.2}, apply {:.2}, hash {:.2})",
        p.total, p.full_download, p.delta_download, p.decompression, p.application, p.hash_verification
    )
}

pub fn plan(a: &PlanArgs) -> Result<Report, CliError> {
    let payload = a.payload.unwrap_or(REFERENCE_PAYLOAD_BYTES);
    if a.curve {
        let compute = a.compute.expect("clap requires --compute");
        let grid = if a.grid.is_empty() { default_grid() } else { a.grid.clone() };
        let points = utilization_curve(compute, payload, &grid)?;
        return Ok(Report::new(utilization_csv(&points), json!({ "curve": points })));
    }
    if a.bandwidth.is_none() && !a.latency {
        return Err(CliError::Input("--bandwidth is required (or use --curve / --latency)".into()));
    }
    let profiles = match &a.profiles {
        Some(p) => load_profiles(p)?,
        None => default_profiles(),
    };
    let mut lines = Vec::new();
    let mut out = Map::new();
    if let Some(bw) = a.bandwidth {
        let r = plan_report(&profiles, &LinkModel { bandwidth_bps: bw, payload_bytes: payload })?;
        lines.push(format!("bandwidth: {}, payload: {payload} B", format_bandwidth(bw)));
        for t in &r.times {
            lines.push(format!("  {:<9} {:>10.3} s", t.codec.name(), t.total_seconds));
        }
        lines.push(format!("chosen codec: {}", r.chosen));
        if r.tier != r.chosen {
            lines.push(format!("fixed tier would pick: {}", r.tier));
        }
        if let Ok(b) = derive_boundaries(&profiles, payload) {
            lines.push(format!(
                "boundaries: zstd-3 below {}, lz4 above {}",
                format_bandwidth(b.zstd3_below_bps),
                format_bandwidth(b.lz4_above_bps)
            ));
            out.insert("boundaries".into(), serde_json::to_value(b).expect("serializable"));
        }
        out.insert("plan".into(), serde_json::to_value(&r).expect("serializable"));
        if let Some(compute) = a.compute {
            let u = utilization(compute, payload, bw)?;
            lines.push(format!("utilization: {u:.4}"));
            out.insert("utilization".into(), json!(u));
        }
    }
    if a.latency {
        let mut s = LatencyScenario::reference();
        if let Some(bw) = a.bandwidth {
            s.bandwidth_bps = bw;
        }
        let l = model_sync_latency(&s)?;
        lines.push(format!("sync latency at {}:", format_bandwidth(s.bandwidth_bps)));
        lines.push(phases("fast path", &l.fast_path));
        lines.push(phases("slow path", &l.slow_path));
        lines.push(phases("cold start", &l.cold_start));
        out.insert("latency".into(), json!({ "scenario": s, "breakdown": l }));
    }
    Ok(Report::new(lines.join("\n"), Value::Object(out)))
}
