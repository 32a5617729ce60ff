//! `sparsync`: diff, replicate and plan sparse BF16 checkpoint updates.

mod analyze;
mod chain;
mod config;
mod data;
mod error;
mod plan;
mod units;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::Value;
use sparsync::{CodecId, SparseRepresentation};

use config::{CliConfig, FileConfig, Overrides};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sparsync", version, about = "Sparse BF16 checkpoint diffing, replication and planning")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = "SPARSYNC_CONFIG")]
    config: Option<PathBuf>,

    /// Local directory used as the object store.
    #[arg(long, global = true, env = "SPARSYNC_STORE", value_name = "DIR")]
    store: Option<PathBuf>,

    #[arg(long, global = true, env = "SPARSYNC_S3_ENDPOINT", value_name = "URL")]
    s3_endpoint: Option<String>,
    #[arg(long, global = true, env = "SPARSYNC_S3_BUCKET")]
    s3_bucket: Option<String>,
    #[arg(long, global = true, env = "SPARSYNC_S3_REGION")]
    s3_region: Option<String>,
    /// Key prefix inside the bucket.
    #[arg(long, global = true, env = "SPARSYNC_S3_PREFIX")]
    s3_prefix: Option<String>,
    #[arg(long, global = true, env = "AWS_ACCESS_KEY_ID", hide_env_values = true, hide = true)]
    access_key: Option<String>,
    #[arg(long, global = true, env = "AWS_SECRET_ACCESS_KEY", hide_env_values = true, hide = true)]
    secret_key: Option<String>,
    #[arg(long, global = true, env = "AWS_SESSION_TOKEN", hide_env_values = true, hide = true)]
    session_token: Option<String>,

    /// Anchor interval k: a FULL checkpoint every k steps.
    #[arg(long, global = true, value_name = "K")]
    anchor_interval: Option<u64>,
    /// Index representation: COO_DOWNSCALED, COO_INT32 or FLAT_INT32.
    #[arg(long, global = true, value_name = "REPR")]
    repr: Option<SparseRepresentation>,
    /// Compressor: identity, lz4, zstd-1, zstd-3 or gzip-6.
    #[arg(long, global = true)]
    codec: Option<CodecId>,

    /// File holding the hex Ed25519 signing seed.
    #[arg(long, global = true, env = "SPARSYNC_SIGNING_KEY", value_name = "FILE")]
    signing_key: Option<PathBuf>,
    /// File holding the hex Ed25519 public key.
    #[arg(long, global = true, env = "SPARSYNC_PUBLIC_KEY", value_name = "FILE")]
    public_key: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic checkpoint pair or chain.
    Gen(data::GenArgs),
    /// Diff two checkpoints into a patch.
    Diff(data::DiffArgs),
    /// Apply a patch to a base checkpoint.
    Apply(data::ApplyArgs),
    /// Print the weights hash of a checkpoint.
    Hash(data::HashArgs),
    /// Check a checkpoint file, optionally against an expected hash.
    Verify(data::VerifyArgs),
    /// Create a manifest signing key pair.
    Keygen(chain::KeygenArgs),
    /// Publish consecutive checkpoints to the store.
    Publish(chain::PublishArgs),
    /// Bring a local replica up to the latest published step.
    Sync(chain::SyncArgs),
    /// Delete objects beyond the retention limits.
    Retain(chain::RetainArgs),
    /// Transfer-time model, codec choice and utilization.
    Plan(plan::PlanArgs),
    /// Absorption and Adam update analysis.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
}

/// Output of one command: human text and the same content as JSON.
pub struct Report {
    pub text: String,
    pub json: Value,
}

impl Report {
    pub fn new(text: impl Into<String>, json: Value) -> Self {
        Self { text: text.into(), json }
    }
}

pub fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            store_dir: self.store.clone(),
            s3_endpoint: self.s3_endpoint.clone(),
            s3_bucket: self.s3_bucket.clone(),
            s3_region: self.s3_region.clone(),
            s3_prefix: self.s3_prefix.clone(),
            access_key: self.access_key.clone(),
            secret_key: self.secret_key.clone(),
            session_token: self.session_token.clone(),
            anchor_interval: self.anchor_interval,
            representation: self.repr,
            codec: self.codec,
            max_deltas: None,
            max_fulls: None,
            signing_key: self.signing_key.clone(),
            public_key: self.public_key.clone(),
        }
    }

    fn resolve(&self, max_deltas: Option<usize>, max_fulls: Option<usize>) -> Result<CliConfig, CliError> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let o = Overrides {
            max_deltas,
            max_fulls,
            ..self.overrides()
        };
        CliConfig::resolve(o, file)
    }
}

fn run(cli: &Cli) -> Result<Report, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen(a) => data::gen(a),
        Command::Diff(a) => data::diff(a, &g.resolve(None, None)?),
        Command::Apply(a) => data::apply(a),
        Command::Hash(a) => data::hash(a),
        Command::Verify(a) => data::verify(a),
        Command::Keygen(a) => chain::keygen(a),
        Command::Publish(a) => chain::publish(a, &g.resolve(None, None)?),
        Command::Sync(a) => chain::sync(a, &g.resolve(None, None)?),
        Command::Retain(a) => chain::retain(&g.resolve(a.max_deltas, a.max_fulls)?),
        Command::Plan(a) => plan::plan(a),
        Command::Analyze(a) => analyze::analyze(a),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(&cli) {
        Ok(r) => {
            let body = if cli.json {
                serde_json::to_string_pretty(&r.json).expect("json values serialize")
            } else {
                r.text.trim_end().to_string()
            };
            // A closed pipe (`| head`) is not a failure of the command.
            if !body.is_empty() {
                let mut out = std::io::stdout().lock();
                match writeln!(out, "{body}") {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                        eprintln!("error: {e}");
                        return ExitCode::from(error::exit::GENERIC);
                    }
                    _ => {}
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": code }));
            }
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
