use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use sparsync::sync::{
    apply_retention, publish_checkpoint, publish_initial, stored_bytes, synchronize_with, ManifestKind, ManifestSigner,
    PublishReport, SyncOptions, SyncPath, SyncState,
};
use sparsync::{write_checkpoint, Checkpoint};

use crate::config::CliConfig;
use crate::data::load;
use crate::error::CliError;
use crate::Report;

const REPLICA_FILE: &str = "replica.pulc";

#[derive(Debug, Args)]
pub struct KeygenArgs {
    /// Writes `PREFIX.key` (secret seed) and `PREFIX.pub` (public key).
    #[arg(long, value_name = "PREFIX")]
    out: PathBuf,
    /// Overwrite existing key files.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    /// Publish the first file as a FULL-only step. Without this flag the first
    /// file must be the already published predecessor of the second.
    #[arg(long)]
    initial: bool,
    /// Checkpoints with consecutive steps, oldest first.
    #[arg(required = true, value_name = "FILES")]
    files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    /// Directory holding the local replica.
    #[arg(long, value_name = "DIR")]
    state_dir: PathBuf,
    /// Fetch and apply deltas sequentially.
    #[arg(long)]
    no_pipeline: bool,
    /// Also write the synchronized checkpoint here.
    #[arg(short, long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetainArgs {
    #[arg(long)]
    pub max_deltas: Option<usize>,
    #[arg(long)]
    pub max_fulls: Option<usize>,
}

fn key_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".key"), with(".pub"))
}

fn write_secret(path: &Path, contents: &str) -> std::io::Result<()> {
    #[cfg(unix)]
    {
        use std::io::Write;
        use std::os::unix::fs::OpenOptionsExt;
        let mut f = fs::OpenOptions::new().write(true).create(true).truncate(true).mode(0o600).open(path)?;
        f.write_all(contents.as_bytes())
    }
    #[cfg(not(unix))]
    fs::write(path, contents)
}

pub fn keygen(a: &KeygenArgs) -> Result<Report, CliError> {
    let (secret, public) = key_paths(&a.out);
    if !a.force {
        if let Some(p) = [&secret, &public].into_iter().find(|p| p.exists()) {
            return Err(CliError::Input(format!("{} exists (use --force to overwrite)", p.display())));
        }
    }
    let signer = ManifestSigner::generate();
    write_secret(&secret, &format!("{}\n", signer.secret_hex()))?;
    fs::write(&public, format!("{}\n", signer.verifier().public_hex()))?;
    let text = format!(
        "key id: {}\nsigning key: {}\npublic key: {}",
        signer.key_id(),
        secret.display(),
        public.display()
    );
    Ok(Report::new(
        text,
        json!({ "key_id": signer.key_id(), "signing_key": secret, "public_key": public }),
    ))
}

fn describe(r: &PublishReport) -> String {
    let kinds: Vec<&str> = [(ManifestKind::Delta, "DELTA"), (ManifestKind::Full, "FULL")]
        .into_iter()
        .filter(|(k, _)| r.has(*k))
        .map(|(_, n)| n)
        .collect();
    let mut s = format!("step {}: {}", r.step, kinds.join("+"));
    if let Some(b) = r.delta_bytes {
        s += &format!(", delta {b} B");
    }
    if let Some(b) = r.full_bytes {
        s += &format!(", full {b} B");
    }
    if let Some(n) = r.changes {
        s += &format!(", {n} changes");
    }
    if r.delta_fallback {
        s += " (delta upload failed, published FULL instead)";
    }
    s
}

pub fn publish(a: &PublishArgs, cfg: &CliConfig) -> Result<Report, CliError> {
    if !a.initial && a.files.len() < 2 {
        return Err(CliError::Input(
            "nothing to publish: give the published predecessor followed by new checkpoints, or use --initial".into(),
        ));
    }
    let store = cfg.open_store()?;
    let signer = cfg.signer()?;
    let pc = cfg.publish_config();
    let mut reports = Vec::new();
    let mut prev: Option<Checkpoint> = None;
    for f in &a.files {
        let c = load(f)?;
        match &prev {
            None if a.initial => reports.push(publish_initial(&c, &*store, &signer, &pc)?),
            None => {}
            Some(p) => reports.push(publish_checkpoint(&c, p, &*store, &signer, &pc)?),
        }
        tracing::info!(step = c.step(), "published");
        prev = Some(c);
    }
    let mut lines: Vec<String> = reports.iter().map(describe).collect();
    let last = reports.last().map(|r| r.step);
    lines.push(format!(
        "published {} steps (k = {}, latest {})",
        reports.len(),
        pc.anchor_interval,
        last.map_or("none".into(), |s| s.to_string())
    ));
    Ok(Report::new(
        lines.join("\n"),
        json!({ "anchor_interval": pc.anchor_interval, "latest": last, "steps": reports }),
    ))
}

fn save_atomic(c: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("pulc.tmp");
    write_checkpoint(c, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sync(a: &SyncArgs, cfg: &CliConfig) -> Result<Report, CliError> {
    let store = cfg.open_store()?;
    let verifier = cfg.verifier()?;
    fs::create_dir_all(&a.state_dir)?;
    let replica = a.state_dir.join(REPLICA_FILE);
    let state = if replica.exists() {
        Some(SyncState::new(load(&replica)?))
    } else {
        None
    };
    let opts = SyncOptions {
        pipelined: !a.no_pipeline,
        ..SyncOptions::default()
    };
    let out = synchronize_with(state, &*store, &verifier, opts)?;
    if out.path != SyncPath::AlreadySynchronized {
        save_atomic(out.state.checkpoint(), &replica)?;
    }
    if let Some(p) = &a.out {
        write_checkpoint(out.state.checkpoint(), p)?;
    }
    let path = match out.path {
        SyncPath::AlreadySynchronized => "already synchronized",
        SyncPath::Fast => "fast path",
        SyncPath::Slow => "slow path",
    };
    let mut lines = vec![path.to_string()];
    if out.recovered {
        lines.push("recovered: local state failed verification, rebuilt from anchor".into());
    }
    lines.push(format!("applied {} deltas", out.deltas_applied));
    lines.push(format!("fetched {} fulls, {} bytes downloaded", out.fulls_fetched, out.bytes_downloaded));
    lines.push(format!("step: {}", out.state.step()));
    lines.push(format!("hash: {}", out.state.hash()));
    Ok(Report::new(
        lines.join("\n"),
        json!({
            "path": out.path,
            "recovered": out.recovered,
            "deltas_applied": out.deltas_applied,
            "fulls_fetched": out.fulls_fetched,
            "bytes_downloaded": out.bytes_downloaded,
            "step": out.state.step(),
            "hash": out.state.hash(),
        }),
    ))
}

pub fn retain(cfg: &CliConfig) -> Result<Report, CliError> {
    let store = cfg.open_store()?;
    let r = apply_retention(&*store, &cfg.retention)?;
    let bytes = stored_bytes(&*store)?;
    let text = format!(
        "deleted {} deltas and {} fulls ({} keys)\nretained {} deltas and {} fulls ({bytes} bytes stored)",
        r.deltas_deleted,
        r.fulls_deleted,
        r.deleted.len(),
        r.deltas_retained,
        r.fulls_retained
    );
    Ok(Report::new(
        text,
        json!({
            "max_deltas": cfg.retention.max_deltas,
            "max_fulls": cfg.retention.max_fulls,
            "deltas_deleted": r.deltas_deleted,
            "fulls_deleted": r.fulls_deleted,
            "keys_deleted": r.deleted,
            "deltas_retained": r.deltas_retained,
            "fulls_retained": r.fulls_retained,
            "stored_bytes": bytes,
        }),
    ))
}
