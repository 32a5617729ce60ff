mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread;

use common::*;
use sparsync::sync::{synchronize, ObjectStore, S3Config, S3Store, StoreError, SyncPath};
use tiny_http::{Header, Method, Response, Server};

type Objects = Arc<Mutex<BTreeMap<String, Vec<u8>>>>;

/// Minimal path-style S3 endpoint: PUT, GET, DELETE and ListObjectsV2.
fn serve(bucket: &'static str) -> (String, Objects) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
    let objects: Objects = Arc::default();
    let store = objects.clone();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let url = url::Url::parse(&format!("http://h{}", req.url())).unwrap();
            let path = url.path().trim_start_matches('/').to_string();
            let key = path.strip_prefix(bucket).unwrap_or("").trim_start_matches('/').to_string();
            let mut objs = store.lock().unwrap();
            let resp = match *req.method() {
                Method::Put => {
                    let mut body = Vec::new();
                    req.as_reader().read_to_end(&mut body).unwrap();
                    objs.insert(key, body);
                    Response::from_data(Vec::new())
                }
                Method::Get if key.is_empty() => {
                    let prefix = url
                        .query_pairs()
                        .find(|(k, _)| k == "prefix")
                        .map(|(_, v)| v.into_owned())
                        .unwrap_or_default();
                    let mut xml = format!(
                        "<?xml version=\"1.0\" encoding=\"UTF-8\"?><ListBucketResult><Name>{bucket}</Name><Prefix>{prefix}</Prefix><MaxKeys>1000</MaxKeys><IsTruncated>false</IsTruncated>"
                    );
                    for (k, v) in objs.iter().filter(|(k, _)| k.starts_with(&prefix)) {
                        xml.push_str(&format!(
                            "<Contents><Key>{k}</Key><LastModified>2024-01-01T00:00:00.000Z</LastModified><ETag>\"0\"</ETag><Size>{}</Size><StorageClass>STANDARD</StorageClass></Contents>",
                            v.len()
                        ));
                    }
                    xml.push_str("</ListBucketResult>");
                    Response::from_data(xml.into_bytes())
                        .with_header(Header::from_bytes("Content-Type", "application/xml").unwrap())
                }
                Method::Get => match objs.get(&key) {
                    Some(v) => Response::from_data(v.clone()),
                    None => Response::from_data(b"<Error><Code>NoSuchKey</Code></Error>".to_vec()).with_status_code(404),
                },
                Method::Delete => {
                    objs.remove(&key);
                    Response::from_data(Vec::new()).with_status_code(204)
                }
                _ => Response::from_data(Vec::new()).with_status_code(405),
            };
            drop(objs);
            let _ = req.respond(resp);
        }
    });
    (addr, objects)
}

fn config(endpoint: String, prefix: &str) -> S3Config {
    S3Config {
        endpoint,
        bucket: "chain".into(),
        region: "auto".into(),
        access_key: Some("AKIDEXAMPLE".into()),
        secret_key: Some("secret".into()),
        session_token: None,
        prefix: prefix.into(),
    }
}

#[test]
fn object_contract_over_http() {
    let (endpoint, objects) = serve("chain");
    let s = S3Store::new(&config(endpoint, "run1")).unwrap();
    s.put("checkpoints/1/delta.pulp", b"abc").unwrap();
    s.put("ready/1", b"").unwrap();
    assert_eq!(s.get("checkpoints/1/delta.pulp").unwrap(), b"abc");
    assert_eq!(s.get("ready/1").unwrap(), b"");
    assert!(matches!(s.get("checkpoints/2/delta.pulp"), Err(StoreError::NotFound(_))));
    assert_eq!(s.list("ready/").unwrap(), ["ready/1"]);
    assert!(objects.lock().unwrap().contains_key("run1/ready/1"));
    s.delete("ready/1").unwrap();
    s.delete("ready/1").unwrap();
    assert!(s.list("ready/").unwrap().is_empty());
}

#[test]
fn chain_over_http() {
    let (endpoint, _) = serve("chain");
    let s = S3Store::new(&config(endpoint, "")).unwrap();
    let c = chain(12, 21);
    publish_all(&s, &c, 10);
    let out = synchronize(None, &s, &signer().verifier()).unwrap();
    assert_eq!(out.path, SyncPath::Slow);
    assert_eq!(out.state.hash(), c[12].hash());
    assert_eq!(out.deltas_applied, 2);
}

#[test]
fn unreachable_endpoint() {
    // Bind then drop to get a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let s = S3Store::new(&config(format!("http://127.0.0.1:{port}"), "")).unwrap();
    assert!(matches!(s.get("ready/1"), Err(StoreError::Unreachable(_))));
    assert!(S3Store::new(&S3Config::default()).is_err());
}
