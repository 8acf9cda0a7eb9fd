//! Files the CLI reads and writes, and the `serve` configuration.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use apikey_core::account::{AccountPublicKey, AccountScheme, AccountSigningKey};
use apikey_core::encoding::{biguint_from_hex, biguint_to_hex};
use apikey_core::paillier::{KeyCorrectnessProof, KeyMode, PaillierSecretKey};
use apikey_core::wire::Handler;
use apikey_service::{Clock, ExchangeService, HttpServer, Storage, SystemClock, TcpServer, TicketWorker};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FileError> {
    let text = std::fs::read_to_string(path).map_err(|source| FileError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| FileError::Parse { path: path.into(), message: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FileError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|source| FileError::Io { path: path.into(), source })
}

/// The exchange's Paillier secret key and its correctness proof.
#[derive(Serialize, Deserialize)]
pub struct ExchangeKeyFile {
    pub p: String,
    pub q: String,
    pub proof: KeyCorrectnessProof,
}

impl ExchangeKeyFile {
    pub fn new(sk: &PaillierSecretKey, proof: KeyCorrectnessProof) -> Self {
        let (p, q) = sk.primes();
        Self { p: biguint_to_hex(p), q: biguint_to_hex(q), proof }
    }

    pub fn load_key(&self, mode: KeyMode) -> Result<(PaillierSecretKey, KeyCorrectnessProof), FileError> {
        let p = biguint_from_hex(&self.p).map_err(|e| FileError::Invalid(format!("p: {e}")))?;
        let q = biguint_from_hex(&self.q).map_err(|e| FileError::Invalid(format!("q: {e}")))?;
        let sk = PaillierSecretKey::from_primes(p, q, mode).map_err(|e| FileError::Invalid(e.to_string()))?;
        Ok((sk, self.proof.clone()))
    }
}

/// An account key as kept on the trusted device.
#[derive(Serialize, Deserialize)]
pub struct AccountKeyFile {
    pub scheme: AccountScheme,
    pub secret: String,
    pub public_key: AccountPublicKey,
}

impl AccountKeyFile {
    pub fn new(key: &AccountSigningKey) -> Self {
        Self { scheme: key.scheme(), secret: hex::encode(key.to_bytes()), public_key: key.public_key() }
    }

    pub fn signing_key(&self) -> Result<AccountSigningKey, FileError> {
        let bytes: [u8; 32] = hex::decode(&self.secret)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| FileError::Invalid("account secret must be 32 bytes of hex".into()))?;
        let key = AccountSigningKey::from_bytes(self.scheme, &bytes).map_err(|e| FileError::Invalid(e.to_string()))?;
        if key.public_key() != self.public_key {
            return Err(FileError::Invalid("account public key does not match secret".into()));
        }
        Ok(key)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    /// Framed-TCP listen address.
    pub listen: Option<String>,
    /// HTTP listen address.
    pub http: Option<String>,
    #[serde(default = "default_http_threads")]
    pub http_threads: usize,
    pub paillier_key: PathBuf,
    pub storage: Option<StorageConfig>,
    #[serde(default)]
    pub test: TestFlags,
}

fn default_http_threads() -> usize {
    4
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConfig {
    pub path: PathBuf,
    /// 32-byte hex key sealing persisted nonce secrets.
    pub pool_key: String,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFlags {
    /// Accept undersized Paillier keys.
    #[serde(default)]
    pub insecure_keys: bool,
    /// How often due tickets are released; defaults to one second.
    pub ticket_interval_ms: Option<u64>,
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self, FileError> {
        let text = std::fs::read_to_string(path).map_err(|source| FileError::Io { path: path.into(), source })?;
        let mut cfg: ServeConfig =
            toml::from_str(&text).map_err(|e| FileError::Parse { path: path.into(), message: e.to_string() })?;
        if let Some(base) = path.parent() {
            cfg.paillier_key = base.join(&cfg.paillier_key);
            if let Some(s) = cfg.storage.as_mut() {
                s.path = base.join(&s.path);
            }
        }
        Ok(cfg)
    }
}

pub struct Running {
    pub service: Arc<ExchangeService>,
    pub tcp: Option<TcpServer>,
    pub http: Option<HttpServer>,
    _worker: TicketWorker,
}

impl Running {
    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp.as_ref().map(TcpServer::local_addr)
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http.as_ref().map(HttpServer::local_addr)
    }
}

/// Boots the exchange described by `cfg`.
pub fn serve(cfg: &ServeConfig, clock: Arc<dyn Clock>) -> Result<Running, FileError> {
    let mode = if cfg.test.insecure_keys { KeyMode::InsecureTest } else { KeyMode::Standard };
    let (sk, proof) = read_json::<ExchangeKeyFile>(&cfg.paillier_key)?.load_key(mode)?;
    let storage = match &cfg.storage {
        None => Storage::Memory,
        Some(s) => {
            let pool_key: [u8; 32] = hex::decode(&s.pool_key)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| FileError::Invalid("storage.pool_key must be 32 bytes of hex".into()))?;
            Storage::Dir { path: s.path.clone(), pool_key }
        }
    };
    let service = Arc::new(ExchangeService::open(sk, proof, storage, clock).map_err(|e| FileError::Invalid(e.to_string()))?);
    let handler: Arc<dyn Handler> = service.clone();
    let io = |e: std::io::Error| FileError::Invalid(format!("bind: {e}"));
    let tcp = cfg.listen.as_deref().map(|a| TcpServer::bind(a, handler.clone())).transpose().map_err(io)?;
    let http = cfg.http.as_deref().map(|a| HttpServer::bind(a, handler.clone(), cfg.http_threads)).transpose().map_err(io)?;
    if tcp.is_none() && http.is_none() {
        return Err(FileError::Invalid("configure at least one of `listen` and `http`".into()));
    }
    let every = Duration::from_millis(cfg.test.ticket_interval_ms.unwrap_or(1000));
    let worker = TicketWorker::spawn(service.clone(), every);
    Ok(Running { service, tcp, http, _worker: worker })
}

pub fn system_clock() -> Arc<dyn Clock> {
    Arc::new(SystemClock)
}
