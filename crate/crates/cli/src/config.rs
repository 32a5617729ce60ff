//! Layered configuration: flags, then environment (both via clap), then the
//! TOML config file, then built-in defaults.
//!
//! ```toml
//! anchor_interval = 50
//! representation = "COO_DOWNSCALED"
//! codec = "zstd-1"
//!
//! [retention]
//! max_deltas = 100
//! max_fulls = 10
//!
//! [store]
//! kind = "local"          # or "s3"
//! path = "/var/lib/ckpt"  # local only
//! # endpoint, bucket, region, prefix, access_key, secret_key, session_token
//!
//! [keys]
//! signing_key = "keys/publisher.key"
//! public_key = "keys/publisher.pub"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sparsync::sync::{
    LocalStore, ManifestSigner, ManifestVerifier, ObjectStore, PublishConfig, RetentionPolicy, S3Config, S3Store,
};
use sparsync::{CodecId, SparseRepresentation};

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub anchor_interval: Option<u64>,
    pub representation: Option<SparseRepresentation>,
    pub codec: Option<CodecId>,
    #[serde(default)]
    pub retention: RetentionSection,
    pub store: Option<StoreSection>,
    #[serde(default)]
    pub keys: KeySection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionSection {
    pub max_deltas: Option<usize>,
    pub max_fulls: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StoreSection {
    Local { path: PathBuf },
    S3(S3Config),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySection {
    pub signing_key: Option<PathBuf>,
    pub public_key: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }
}

/// Values supplied on the command line or through the environment.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub store_dir: Option<PathBuf>,
    pub s3_endpoint: Option<String>,
    pub s3_bucket: Option<String>,
    pub s3_region: Option<String>,
    pub s3_prefix: Option<String>,
    pub access_key: Option<String>,
    pub secret_key: Option<String>,
    pub session_token: Option<String>,
    pub anchor_interval: Option<u64>,
    pub representation: Option<SparseRepresentation>,
    pub codec: Option<CodecId>,
    pub max_deltas: Option<usize>,
    pub max_fulls: Option<usize>,
    pub signing_key: Option<PathBuf>,
    pub public_key: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoreChoice {
    Local(PathBuf),
    S3(S3Config),
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub store: Option<StoreChoice>,
    pub anchor_interval: u64,
    pub representation: SparseRepresentation,
    pub codec: CodecId,
    pub retention: RetentionPolicy,
    pub signing_key: Option<PathBuf>,
    pub public_key: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let publish = PublishConfig::default();
        Self {
            store: None,
            anchor_interval: publish.anchor_interval,
            representation: publish.representation,
            codec: publish.codec,
            retention: RetentionPolicy::default(),
            signing_key: None,
            public_key: None,
        }
    }
}

impl CliConfig {
    pub fn resolve(o: Overrides, file: FileConfig) -> Result<Self, CliError> {
        let d = CliConfig::default();
        let store = if let Some(dir) = o.store_dir.clone() {
            if o.s3_bucket.is_some() {
                return Err(CliError::Config("choose either a local store or an S3 bucket, not both".into()));
            }
            Some(StoreChoice::Local(dir))
        } else if let Some(bucket) = o.s3_bucket.clone() {
            let endpoint = o
                .s3_endpoint
                .clone()
                .or_else(|| match &file.store {
                    Some(StoreSection::S3(c)) => Some(c.endpoint.clone()),
                    _ => None,
                })
                .ok_or_else(|| CliError::Config("an S3 bucket needs an endpoint".into()))?;
            Some(StoreChoice::S3(s3_with(S3Config { endpoint, bucket, ..S3Config::default() }, &o, None)))
        } else {
            match file.store {
                Some(StoreSection::Local { path }) => Some(StoreChoice::Local(path)),
                Some(StoreSection::S3(c)) => Some(StoreChoice::S3(s3_with(c.clone(), &o, Some(c)))),
                None => None,
            }
        };
        let max_deltas = o.max_deltas.or(file.retention.max_deltas).unwrap_or(d.retention.max_deltas);
        let max_fulls = o.max_fulls.or(file.retention.max_fulls).unwrap_or(d.retention.max_fulls);
        let retention = RetentionPolicy::new(max_deltas, max_fulls).map_err(|e| CliError::Config(e.to_string()))?;
        let anchor_interval = o.anchor_interval.or(file.anchor_interval).unwrap_or(d.anchor_interval);
        if anchor_interval == 0 {
            return Err(CliError::Config("anchor interval must be at least 1".into()));
        }
        Ok(Self {
            store,
            anchor_interval,
            representation: o.representation.or(file.representation).unwrap_or(d.representation),
            codec: o.codec.or(file.codec).unwrap_or(d.codec),
            retention,
            signing_key: o.signing_key.or(file.keys.signing_key),
            public_key: o.public_key.or(file.keys.public_key),
        })
    }

    pub fn publish_config(&self) -> PublishConfig {
        PublishConfig {
            anchor_interval: self.anchor_interval,
            representation: self.representation,
            codec: self.codec,
            ..PublishConfig::default()
        }
    }

    pub fn open_store(&self) -> Result<Box<dyn ObjectStore>, CliError> {
        match &self.store {
            Some(StoreChoice::Local(dir)) => Ok(Box::new(LocalStore::new(dir)?)),
            Some(StoreChoice::S3(c)) => Ok(Box::new(S3Store::new(c)?)),
            None => Err(CliError::Config(
                "no store configured (use --store DIR, --s3-bucket or a [store] section)".into(),
            )),
        }
    }

    pub fn signer(&self) -> Result<ManifestSigner, CliError> {
        let path = self
            .signing_key
            .as_ref()
            .ok_or_else(|| CliError::Config("no signing key configured (use --signing-key)".into()))?;
        Ok(ManifestSigner::from_hex(&read_key(path)?)?)
    }

    pub fn verifier(&self) -> Result<ManifestVerifier, CliError> {
        let path = self
            .public_key
            .as_ref()
            .ok_or_else(|| CliError::Config("no public key configured (use --public-key)".into()))?;
        Ok(ManifestVerifier::from_hex(&read_key(path)?)?)
    }
}

/// Applies flag/env S3 fields over `base`. Credentials from the file are
/// only kept when the endpoint stays the same.
fn s3_with(mut base: S3Config, o: &Overrides, file: Option<S3Config>) -> S3Config {
    if let Some(e) = &o.s3_endpoint {
        if file.as_ref().is_some_and(|f| &f.endpoint != e) {
            base.access_key = None;
            base.secret_key = None;
            base.session_token = None;
        }
        base.endpoint = e.clone();
    }
    if let Some(r) = &o.s3_region {
        base.region = r.clone();
    } else if base.region.is_empty() {
        base.region = "auto".into();
    }
    if let Some(p) = &o.s3_prefix {
        base.prefix = p.clone();
    }
    base.access_key = o.access_key.clone().or(base.access_key);
    base.secret_key = o.secret_key.clone().or(base.secret_key);
    base.session_token = o.session_token.clone().or(base.session_token);
    base
}

fn read_key(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read key {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> FileConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn defaults() {
        let c = CliConfig::resolve(Overrides::default(), FileConfig::default()).unwrap();
        assert_eq!(c.anchor_interval, 50);
        assert_eq!(c.representation, SparseRepresentation::CooDownscaled);
        assert_eq!(c.codec, CodecId::Zstd1);
        assert_eq!((c.retention.max_deltas, c.retention.max_fulls), (100, 10));
        assert!(c.store.is_none());
    }

    #[test]
    fn file_then_flags() {
        let f = "anchor_interval = 20\ncodec = \"lz4\"\nrepresentation = \"FLAT_INT32\"\n\
                 [retention]\nmax_fulls = 4\n[store]\nkind = \"local\"\npath = \"/tmp/x\"\n";
        let c = CliConfig::resolve(Overrides::default(), file(f)).unwrap();
        assert_eq!(c.anchor_interval, 20);
        assert_eq!(c.codec, CodecId::Lz4);
        assert_eq!(c.representation, SparseRepresentation::FlatInt32);
        assert_eq!(c.retention.max_fulls, 4);
        assert_eq!(c.retention.max_deltas, 100);
        assert_eq!(c.store, Some(StoreChoice::Local("/tmp/x".into())));

        let o = Overrides {
            anchor_interval: Some(7),
            codec: Some(CodecId::Gzip6),
            store_dir: Some("/tmp/y".into()),
            ..Overrides::default()
        };
        let c = CliConfig::resolve(o, file(f)).unwrap();
        assert_eq!(c.anchor_interval, 7);
        assert_eq!(c.codec, CodecId::Gzip6);
        assert_eq!(c.representation, SparseRepresentation::FlatInt32);
        assert_eq!(c.store, Some(StoreChoice::Local("/tmp/y".into())));
    }

    #[test]
    fn s3_section_and_overrides() {
        let f = "[store]\nkind = \"s3\"\nendpoint = \"http://a\"\nbucket = \"b\"\naccess_key = \"AK\"\n";
        let o = Overrides {
            s3_prefix: Some("run1".into()),
            secret_key: Some("SK".into()),
            ..Overrides::default()
        };
        let Some(StoreChoice::S3(s)) = CliConfig::resolve(o, file(f)).unwrap().store else {
            panic!("expected s3");
        };
        assert_eq!(s.endpoint, "http://a");
        assert_eq!(s.region, "auto");
        assert_eq!(s.prefix, "run1");
        assert_eq!(s.access_key.as_deref(), Some("AK"));
        assert_eq!(s.secret_key.as_deref(), Some("SK"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<FileConfig>("codec = \"brotli\"").is_err());
        assert!(toml::from_str::<FileConfig>("colour = 1").is_err());
        let o = Overrides {
            anchor_interval: Some(0),
            ..Overrides::default()
        };
        assert!(CliConfig::resolve(o, FileConfig::default()).is_err());
        let o = Overrides {
            store_dir: Some("/x".into()),
            s3_bucket: Some("b".into()),
            ..Overrides::default()
        };
        assert!(CliConfig::resolve(o, FileConfig::default()).is_err());
    }
}
