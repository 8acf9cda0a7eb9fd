//! Python bindings: exchange keys, minting, an in-process exchange and a
//! signing client.

#![allow(clippy::useless_conversion)]

use std::sync::Arc;

use apikey_client::transport::connect;
use apikey_client::{mint_api_key, ApiKeyFile, ClientError, FullKey, InProcess, Session, SignOptions, SignOutcome, Transport};
use apikey_core::account::{AccountScheme, AccountSigningKey};
use apikey_core::curve::CurveId;
use apikey_core::paillier::{KeyCorrectnessProof, PaillierSecretKey};
use apikey_core::policy::{Action, Policy, Rule, SignedPolicy};
use apikey_core::pool::PoolConfig;
use apikey_core::wire::Handler;
use apikey_core::Scheme;
use apikey_service::{ExchangeService, Storage, SystemClock};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::rngs::OsRng;

create_exception!(apikey, ApiKeyError, PyException);
create_exception!(apikey, Denied, ApiKeyError);

fn to_py(e: ClientError) -> PyErr {
    match e {
        ClientError::Denied { code, message } => Denied::new_err(format!("{code:?}: {message}")),
        other => ApiKeyError::new_err(other.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// The exchange's Paillier key pair and its correctness proof.
#[pyclass(frozen)]
struct ExchangeKey {
    sk: PaillierSecretKey,
    proof: KeyCorrectnessProof,
}

#[pymethods]
impl ExchangeKey {
    #[staticmethod]
    #[pyo3(signature = (bits = 2048))]
    fn generate(py: Python<'_>, bits: u64) -> PyResult<Self> {
        py.allow_threads(|| {
            let sk = PaillierSecretKey::generate(bits, &mut OsRng).map_err(value_err)?;
            let proof = KeyCorrectnessProof::prove(&sk).map_err(value_err)?;
            Ok(Self { sk, proof })
        })
    }

    #[getter]
    fn bits(&self) -> u64 {
        self.sk.public_key().bits()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.sk.public_key().fingerprint().to_hex()
    }

    fn verify_proof(&self) -> bool {
        self.proof.verify(self.sk.public_key(), self.proof.params).is_ok()
    }

    fn proof_json(&self) -> String {
        serde_json::to_string(&self.proof).expect("serializable")
    }
}

#[pyclass(frozen)]
struct AccountKey {
    key: AccountSigningKey,
}

#[pymethods]
impl AccountKey {
    #[staticmethod]
    #[pyo3(signature = (scheme = "ed25519"))]
    fn generate(scheme: &str) -> PyResult<Self> {
        let scheme: AccountScheme = scheme.parse().map_err(value_err)?;
        Ok(Self { key: AccountSigningKey::generate(scheme, &mut OsRng) })
    }

    #[getter]
    fn public_key(&self) -> String {
        self.key.public_key().to_hex()
    }

    /// Signs a policy made of `rules_json` (a JSON list of rules) and
    /// returns the signed policy as JSON.
    #[pyo3(signature = (rules_json, version = 1, policy_id = "default"))]
    fn sign_policy(&self, rules_json: &str, version: u64, policy_id: &str) -> PyResult<String> {
        let rules: Vec<Rule> = serde_json::from_str(rules_json).map_err(value_err)?;
        let policy = Policy { policy_id: policy_id.into(), account_key: self.key.public_key(), version, rules };
        policy.validate().map_err(value_err)?;
        Ok(serde_json::to_string(&policy.sign(&self.key)).expect("serializable"))
    }
}

/// A full signing key, consumed by [`mint`].
#[pyclass]
struct FullSigningKey {
    key: Option<FullKey>,
}

#[pymethods]
impl FullSigningKey {
    #[staticmethod]
    #[pyo3(signature = (scheme = "ecdsa", curve = "secp256k1"))]
    fn generate(scheme: &str, curve: &str) -> PyResult<Self> {
        let scheme: Scheme = scheme.parse().map_err(value_err)?;
        let curve: CurveId = curve.parse().map_err(value_err)?;
        Ok(Self { key: Some(FullKey::generate(scheme, curve, &mut OsRng)) })
    }

    #[getter]
    fn public_key(&self) -> PyResult<String> {
        let key = self.key.as_ref().ok_or_else(|| ApiKeyError::new_err("key already minted"))?;
        key.public_key_hex().map_err(to_py)
    }
}

#[pyclass(frozen)]
struct ApiKey {
    file: ApiKeyFile,
}

#[pymethods]
impl ApiKey {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { file: ApiKeyFile::parse(text, None).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.file.to_json()
    }

    #[getter]
    fn key_id(&self) -> String {
        self.file.key_id.to_string()
    }

    #[getter]
    fn scheme(&self) -> String {
        self.file.scheme.to_string()
    }

    #[getter]
    fn public_key(&self) -> String {
        self.file.public_key.clone()
    }
}

/// Mints an API key. The full key is wiped and cannot be used again.
#[pyfunction]
fn mint(full: &mut FullSigningKey, exchange: &ExchangeKey, account: &AccountKey) -> PyResult<ApiKey> {
    let key = full.key.take().ok_or_else(|| ApiKeyError::new_err("key already minted"))?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let file = mint_api_key(key, exchange.sk.public_key(), &exchange.proof, &account.key.public_key(), created, &mut OsRng)
        .map_err(to_py)?;
    Ok(ApiKey { file })
}

/// An in-memory exchange running in this process.
#[pyclass(frozen)]
struct Exchange {
    service: Arc<ExchangeService>,
}

#[pymethods]
impl Exchange {
    #[new]
    fn new(key: &ExchangeKey) -> PyResult<Self> {
        let service = ExchangeService::open(key.sk.clone(), key.proof.clone(), Storage::Memory, Arc::new(SystemClock))
            .map_err(|e| ApiKeyError::new_err(e.to_string()))?;
        Ok(Self { service: Arc::new(service) })
    }

    fn pool_len(&self, key: &ApiKey) -> usize {
        self.service.pool_len(&key.file.key_id)
    }
}

#[pyclass(frozen)]
struct SignResult {
    #[pyo3(get)]
    signature: Option<Py<PyBytes>>,
    #[pyo3(get)]
    signature_id: Option<String>,
    #[pyo3(get)]
    ticket_id: Option<String>,
    #[pyo3(get)]
    release_at_ms: Option<u64>,
}

/// A signing session for one API key.
#[pyclass(frozen)]
struct Client {
    session: Session<Box<dyn Transport>>,
}

#[pymethods]
impl Client {
    /// Talks to `exchange` in-process.
    #[staticmethod]
    #[pyo3(signature = (exchange, key, batch_size = 32))]
    fn local(exchange: &Exchange, key: &ApiKey, batch_size: usize) -> PyResult<Self> {
        let handler: Arc<dyn Handler> = exchange.service.clone();
        let transport: Box<dyn Transport> = Box::new(InProcess::new(handler, None));
        Self::open(transport, key, batch_size)
    }

    /// Talks to a running exchange at `tcp://host:port` or `http://host:port`.
    #[staticmethod]
    #[pyo3(signature = (endpoint, key, batch_size = 32))]
    fn connect(endpoint: &str, key: &ApiKey, batch_size: usize) -> PyResult<Self> {
        Self::open(connect(endpoint).map_err(to_py)?, key, batch_size)
    }

    fn register(&self, py: Python<'_>, signed_policy_json: &str) -> PyResult<()> {
        let policy: SignedPolicy = serde_json::from_str(signed_policy_json).map_err(value_err)?;
        py.allow_threads(|| self.session.register(policy)).map_err(to_py)
    }

    fn update_policy(&self, py: Python<'_>, signed_policy_json: &str) -> PyResult<u64> {
        let policy: SignedPolicy = serde_json::from_str(signed_policy_json).map_err(value_err)?;
        py.allow_threads(|| self.session.update_policy(policy)).map_err(to_py)
    }

    /// Prepares `count` nonce points; returns how many were added.
    fn refill(&self, py: Python<'_>, count: usize) -> PyResult<usize> {
        py.allow_threads(|| self.session.refill(count)).map(|o| o.added).map_err(to_py)
    }

    fn pool_len(&self) -> usize {
        self.session.pool_len()
    }

    /// Signs `message`. `action_json` describes a trade or withdrawal, e.g.
    /// `{"kind": "trade", "market": "BTC-USD", "amount": "5"}`.
    #[pyo3(signature = (message, action_json = None))]
    fn sign(&self, py: Python<'_>, message: &[u8], action_json: Option<&str>) -> PyResult<SignResult> {
        let action: Option<Action> = action_json.map(serde_json::from_str).transpose().map_err(value_err)?;
        let opts = SignOptions { action, ..SignOptions::default() };
        let outcome = py.allow_threads(|| self.session.sign(message, &opts)).map_err(to_py)?;
        Ok(match outcome {
            SignOutcome::Signed { signature, signature_id } => SignResult {
                signature: Some(PyBytes::new_bound(py, &signature).unbind()),
                signature_id: Some(signature_id),
                ticket_id: None,
                release_at_ms: None,
            },
            SignOutcome::Deferred { ticket_id, release_at_ms } => SignResult {
                signature: None,
                signature_id: None,
                ticket_id: Some(ticket_id),
                release_at_ms: Some(release_at_ms),
            },
        })
    }

    fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        self.session.verify(message, signature)
    }
}

impl Client {
    fn open(transport: Box<dyn Transport>, key: &ApiKey, batch_size: usize) -> PyResult<Self> {
        let config = PoolConfig { batch_size: batch_size.max(1), low_water: batch_size / 4 };
        Ok(Self { session: Session::open(transport, key.file.clone(), config).map_err(to_py)? })
    }
}

#[pymodule]
fn apikey(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ApiKeyError", m.py().get_type_bound::<ApiKeyError>())?;
    m.add("Denied", m.py().get_type_bound::<Denied>())?;
    m.add_class::<ExchangeKey>()?;
    m.add_class::<AccountKey>()?;
    m.add_class::<FullSigningKey>()?;
    m.add_class::<ApiKey>()?;
    m.add_class::<Exchange>()?;
    m.add_class::<Client>()?;
    m.add_class::<SignResult>()?;
    m.add_function(wrap_pyfunction!(mint, m)?)?;
    Ok(())
}
