#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use senseslam::{SenseInventory, SessionConfig};
use senseslam_cli::commands::load_inventory;
use senseslam_cli::service::{self, AppState};
use serde_json::Value;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn mac_inventory() -> SenseInventory {
    load_inventory(&fixture("embeddings.txt"), Some(&fixture("inventory.txt"))).unwrap()
}

pub fn small_config() -> SessionConfig {
    SessionConfig {
        dim: 4,
        particle_multiplier: 8,
        seed: 11,
        ..SessionConfig::default()
    }
}

/// A running service on an ephemeral port with its own runtime.
pub struct Server {
    pub base: String,
    pub client: reqwest::Client,
    pub rt: tokio::runtime::Runtime,
}

impl Server {
    pub fn start(app: AppState) -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let addr = listener.local_addr().unwrap();
        rt.spawn(service::serve(listener, Arc::new(app)));
        Self {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
            rt,
        }
    }

    pub fn mac() -> Self {
        Self::start(AppState::single(mac_inventory(), Some(small_config())))
    }

    /// Sends a request and returns status and JSON body (`Null` when empty).
    pub fn call(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        self.rt.block_on(self.call_async(method, path, body))
    }

    pub async fn call_async(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let url = format!("{}{}", self.base, path);
        let method = reqwest::Method::from_bytes(method.as_bytes()).unwrap();
        let mut req = self.client.request(method, url);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.unwrap();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }
}

/// Validates `instance` against a published schema file.
pub fn assert_schema(file: &str, instance: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(file);
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{file}: {errors:?}\n{instance}");
}
