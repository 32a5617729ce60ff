use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use sparsync::analysis::sparsity;
use sparsync::patch::{decode_with, measure_layout, patch_to_bytes, read_patch, DecodeOptions};
use sparsync::synth::{generate_chain, generate_synthetic, SyntheticSpec};
use sparsync::{encode, read_checkpoint, write_checkpoint, Checkpoint, WeightsHash};

use crate::config::CliConfig;
use crate::error::CliError;
use crate::{warn, Report};

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Tensor shape such as `512x1024` or `4096` (repeatable).
    #[arg(long = "shape", value_name = "RxC", value_parser = parse_shape)]
    shapes: Vec<Vec<usize>>,
    /// Fraction of elements left bitwise unchanged per step.
    #[arg(long, default_value_t = 0.99)]
    sparsity: f64,
    /// Mean width of runs of adjacent changes.
    #[arg(long, default_value_t = 16)]
    cluster: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE", requires = "out_curr", conflicts_with_all = ["steps", "out_dir"])]
    out_prev: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "out_prev")]
    out_curr: Option<PathBuf>,
    /// Generate a chain of this many steps after the base.
    #[arg(long, requires = "out_dir")]
    steps: Option<usize>,
    /// Directory receiving `step_NNNNNN.pulc` files.
    #[arg(long, value_name = "DIR", requires = "steps")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    prev: PathBuf,
    curr: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    base: PathBuf,
    patch: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    out: PathBuf,
    /// Skip the weights hash check of the result.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Debug, Args)]
pub struct HashArgs {
    file: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    file: PathBuf,
    /// Expected weights hash (hex).
    #[arg(long, value_name = "HEX")]
    expect: Option<String>,
}

fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    let dims = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>().map_err(|_| format!("invalid shape `{s}`")))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(format!("invalid shape `{s}`: dimensions must be positive"));
    }
    Ok(dims)
}

/// Four decimals with trailing zeros trimmed, keeping at least one.
pub fn frac(x: f64) -> String {
    let s = format!("{x:.4}");
    let t = s.trim_end_matches('0');
    if t.ends_with('.') {
        format!("{t}0")
    } else {
        t.to_string()
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    read_checkpoint(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn save(c: &Checkpoint, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(write_checkpoint(c, path)?)
}

pub fn chain_file(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.pulc"))
}

pub fn gen(a: &GenArgs) -> Result<Report, CliError> {
    let shapes = if a.shapes.is_empty() { vec![vec![512, 1024]] } else { a.shapes.clone() };
    let spec = SyntheticSpec::new(shapes, a.sparsity, a.cluster, a.seed);
    let (written, first) = match (&a.out_prev, &a.out_curr, a.steps, &a.out_dir) {
        (Some(p), Some(c), None, None) => {
            let (prev, curr) = generate_synthetic(&spec)?;
            save(&prev, p)?;
            save(&curr, c)?;
            let s = sparsity(&prev, &curr, 1)?;
            (vec![p.clone(), c.clone()], s)
        }
        (None, None, Some(steps), Some(dir)) => {
            if steps == 0 {
                return Err(CliError::Input("--steps must be at least 1".into()));
            }
            let chain = generate_chain(&spec, steps)?;
            let mut files = Vec::with_capacity(chain.len());
            for c in &chain {
                let f = chain_file(dir, c.step());
                save(c, &f)?;
                files.push(f);
            }
            (files, sparsity(&chain[0], &chain[1], 1)?)
        }
        _ => return Err(CliError::Input("use --out-prev/--out-curr or --steps/--out-dir".into())),
    };
    let text = format!(
        "wrote {} checkpoints ({} elements)\nsparsity: {}\nchanges per step: {}\nseed: {}",
        written.len(),
        spec.num_elements(),
        frac(first.sparsity),
        first.changed,
        a.seed
    );
    Ok(Report::new(
        text,
        json!({
            "files": written,
            "elements": spec.num_elements(),
            "sparsity": first.sparsity,
            "changes_per_step": first.changed,
            "seed": a.seed,
        }),
    ))
}

pub fn diff(a: &DiffArgs, cfg: &CliConfig) -> Result<Report, CliError> {
    let prev = load(&a.prev)?;
    let curr = load(&a.curr)?;
    let patch = encode(&curr, &prev, cfg.representation, cfg.codec)?;
    let bytes = patch_to_bytes(&patch)?;
    fs::write(&a.out, &bytes)?;
    let s = sparsity(&prev, &curr, 1)?;
    let m = measure_layout(&patch, prev.dense_bytes(), cfg.representation.layout(), cfg.codec)?;
    let ratio = |r: Option<f64>| r.map_or("n/a (empty patch)".to_string(), |r| format!("{r:.2}x"));
    let text = format!(
        "changes: {}\nsparsity: {}\nrepresentation: {}\ncodec: {}\npatch bytes: {}\nsparse ratio: {}\nfull ratio: {}",
        patch.num_changes(),
        frac(s.sparsity),
        cfg.representation,
        cfg.codec,
        bytes.len(),
        ratio(m.sparse_ratio),
        ratio(m.full_ratio),
    );
    Ok(Report::new(
        text,
        json!({
            "changes": patch.num_changes(),
            "total": s.total,
            "sparsity": s.sparsity,
            "representation": cfg.representation,
            "codec": cfg.codec,
            "patch_bytes": bytes.len(),
            "sparse_ratio": m.sparse_ratio,
            "full_ratio": m.full_ratio,
            "target_hash": patch.target_hash,
        }),
    ))
}

pub fn apply(a: &ApplyArgs) -> Result<Report, CliError> {
    let base = load(&a.base)?;
    let patch = read_patch(&a.patch)?;
    if patch.base_step != base.step() {
        warn(&format!("patch base step {} differs from checkpoint step {}", patch.base_step, base.step()));
    }
    let out = decode_with(&base, &patch, DecodeOptions { verify_hash: !a.no_verify })?;
    if a.no_verify {
        warn("hash verification skipped (--no-verify); the output may not match the publisher's weights");
    }
    save(&out, &a.out)?;
    let h = out.hash();
    let text = format!("wrote step {} ({} changes applied)\nhash: {h}", out.step(), patch.num_changes());
    Ok(Report::new(
        text,
        json!({ "step": out.step(), "changes": patch.num_changes(), "hash": h, "verified": !a.no_verify }),
    ))
}

pub fn hash(a: &HashArgs) -> Result<Report, CliError> {
    let h = load(&a.file)?.hash();
    Ok(Report::new(h.to_hex(), json!({ "hash": h })))
}

pub fn verify(a: &VerifyArgs) -> Result<Report, CliError> {
    let c = load(&a.file)?;
    let h = c.hash();
    if let Some(expect) = &a.expect {
        let want: WeightsHash = expect.parse().map_err(|e| CliError::Input(format!("--expect: {e}")))?;
        if want != h {
            return Err(CliError::HashMismatch {
                expected: want.to_hex(),
                actual: h.to_hex(),
            });
        }
    }
    let text = format!(
        "ok: step {}, {} tensors, {} elements\nhash: {h}",
        c.step(),
        c.tensors().len(),
        c.num_elements()
    );
    Ok(Report::new(
        text,
        json!({ "step": c.step(), "tensors": c.tensors().len(), "elements": c.num_elements(), "hash": h }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("512x1024").unwrap(), vec![512, 1024]);
        assert_eq!(parse_shape("77").unwrap(), vec![77]);
        assert!(parse_shape("0x3").is_err());
        assert!(parse_shape("ax3").is_err());
    }

    #[test]
    fn fractions() {
        assert_eq!(frac(1.0), "1.0");
        assert_eq!(frac(0.990002), "0.99");
        assert_eq!(frac(0.95), "0.95");
        assert_eq!(frac(0.12346), "0.1235");
    }
}
