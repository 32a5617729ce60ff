use s3::creds::Credentials;
use s3::error::S3Error;
use s3::{Bucket, Region};
use serde::{Deserialize, Serialize};

use super::store::{ObjectStore, StoreError};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct S3Config {
    pub endpoint: String,
    pub bucket: String,
    #[serde(default = "default_region")]
    pub region: String,
    #[serde(default)]
    pub access_key: Option<String>,
    #[serde(default)]
    pub secret_key: Option<String>,
    #[serde(default)]
    pub session_token: Option<String>,
    /// Key prefix inside the bucket, e.g. `runs/exp1/`.
    #[serde(default)]
    pub prefix: String,
}

fn default_region() -> String {
    "auto".to_string()
}

/// S3-compatible backend (AWS S3, R2, MinIO) using path-style requests.
pub struct S3Store {
    bucket: Box<Bucket>,
    prefix: String,
}

impl std::fmt::Debug for S3Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("S3Store")
            .field("bucket", &self.bucket.name)
            .field("prefix", &self.prefix)
            .finish()
    }
}

fn backend(e: S3Error) -> StoreError {
    match e {
        S3Error::Atto(e) => StoreError::Unreachable(e.to_string()),
        S3Error::Io(e) => StoreError::Unreachable(e.to_string()),
        e => StoreError::Backend(e.to_string()),
    }
}

fn check_status(key: &str, status: u16) -> Result<(), StoreError> {
    match status {
        200..=299 => Ok(()),
        404 => Err(StoreError::NotFound(key.to_string())),
        s => Err(StoreError::Backend(format!("HTTP {s} for `{key}`"))),
    }
}

impl S3Store {
    pub fn new(config: &S3Config) -> Result<Self, StoreError> {
        if config.bucket.is_empty() || config.endpoint.is_empty() {
            return Err(StoreError::Backend("S3 endpoint and bucket are required".into()));
        }
        let region = Region::Custom {
            region: config.region.clone(),
            endpoint: config.endpoint.trim_end_matches('/').to_string(),
        };
        let credentials = Credentials {
            access_key: config.access_key.clone(),
            secret_key: config.secret_key.clone(),
            security_token: None,
            session_token: config.session_token.clone(),
            expiration: None,
        };
        let bucket = Bucket::new(&config.bucket, region, credentials)
            .map_err(backend)?
            .with_path_style();
        let mut prefix = config.prefix.trim_start_matches('/').to_string();
        if !prefix.is_empty() && !prefix.ends_with('/') {
            prefix.push('/');
        }
        Ok(Self { bucket, prefix })
    }

    fn full(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }
}

impl ObjectStore for S3Store {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let r = self.bucket.put_object(self.full(key), bytes).map_err(backend)?;
        check_status(key, r.status_code())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        let r = self.bucket.get_object(self.full(key)).map_err(backend)?;
        check_status(key, r.status_code())?;
        Ok(r.to_vec())
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>, StoreError> {
        let pages = self.bucket.list(self.full(prefix), None).map_err(backend)?;
        let mut keys: Vec<String> = pages
            .into_iter()
            .flat_map(|p| p.contents)
            .filter_map(|o| o.key.strip_prefix(&self.prefix).map(str::to_string))
            .collect();
        keys.sort();
        Ok(keys)
    }

    fn delete(&self, key: &str) -> Result<(), StoreError> {
        let r = self.bucket.delete_object(self.full(key)).map_err(backend)?;
        match check_status(key, r.status_code()) {
            Err(StoreError::NotFound(_)) => Ok(()),
            other => other,
        }
    }
}
