//! Decimal unit parsing.
//!
//! Bandwidth: `bps`, `kbit`, `Mbit`, `Gbit`, `Tbit` (bits per second, an
//! optional `/s` suffix is accepted), or byte rates `kB/s`, `MB/s`, `GB/s`.
//! Sizes: `B`, `kB`, `MB`, `GB`, `TB` (bytes) or `kbit`, `Mbit`, `Gbit`.
//! Durations: `ms`, `s`, `m`, `h`. Bare numbers use the base unit.
//! All prefixes are powers of 1000.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid {kind} `{input}`: {reason}")]
pub struct UnitError {
    kind: &'static str,
    input: String,
    reason: String,
}

/// Splits at the longest numeric prefix.
fn split(s: &str) -> (&str, &str) {
    let s = s.trim();
    let end = (1..=s.len())
        .rev()
        .filter(|&i| s.is_char_boundary(i))
        .find(|&i| s[..i].parse::<f64>().is_ok())
        .unwrap_or(0);
    (&s[..end], s[end..].trim())
}

fn parse_with(kind: &'static str, input: &str, unit: impl Fn(&str) -> Option<f64>) -> Result<f64, UnitError> {
    let err = |reason: &str| UnitError {
        kind,
        input: input.to_string(),
        reason: reason.to_string(),
    };
    let (num, suffix) = split(input);
    let value: f64 = num.parse().map_err(|_| err("expected a number followed by a unit"))?;
    let scale = unit(suffix).ok_or_else(|| err("unknown unit"))?;
    let v = value * scale;
    if !v.is_finite() || v < 0.0 {
        return Err(err("must be finite and non-negative"));
    }
    Ok(v)
}

fn prefix(p: &str) -> Option<f64> {
    Some(match p {
        "" => 1.0,
        "k" | "K" => 1e3,
        "M" | "m" => 1e6,
        "G" | "g" => 1e9,
        "T" | "t" => 1e12,
        _ => return None,
    })
}

/// Bits per second.
pub fn parse_bandwidth(s: &str) -> Result<f64, UnitError> {
    parse_with("bandwidth", s, |u| {
        let u = u.strip_suffix("/s").unwrap_or(u);
        if u.is_empty() {
            return Some(1.0);
        }
        if let Some(p) = u.strip_suffix("bps").or_else(|| u.strip_suffix("bit")) {
            return prefix(p);
        }
        if let Some(p) = u.strip_suffix('B') {
            return prefix(p).map(|x| x * 8.0);
        }
        None
    })
}

/// Bytes.
pub fn parse_size(s: &str) -> Result<f64, UnitError> {
    parse_with("size", s, |u| {
        if u.is_empty() {
            return Some(1.0);
        }
        if let Some(p) = u.strip_suffix("bit") {
            return prefix(p).map(|x| x / 8.0);
        }
        u.strip_suffix('B').and_then(prefix)
    })
}

/// Seconds.
pub fn parse_duration(s: &str) -> Result<f64, UnitError> {
    parse_with("duration", s, |u| {
        Some(match u {
            "" | "s" => 1.0,
            "ms" => 1e-3,
            "m" | "min" => 60.0,
            "h" => 3600.0,
            _ => return None,
        })
    })
}

pub fn format_bandwidth(bps: f64) -> String {
    match bps {
        b if b >= 1e9 => format!("{:.3} Gbit/s", b / 1e9),
        b if b >= 1e6 => format!("{:.3} Mbit/s", b / 1e6),
        b if b >= 1e3 => format!("{:.3} kbit/s", b / 1e3),
        b => format!("{b:.3} bit/s"),
    }
}
