//! Prepared-nonce pools.
//!
//! The client keeps its half of each prepared nonce in a [`ClientPool`],
//! the exchange keeps `k1` / `r_s` in a [`ServerPool`] keyed by
//! `(key id, R)`. Both pools hand out each entry at most once. The server
//! pool writes every change to a [`PoolStore`] before it takes effect in
//! memory, and consumed points are kept as tombstones so they can never be
//! added back.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use curve25519_dalek::scalar::Scalar;
use indexmap::IndexMap;
use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::curve::{CurveId, CurvePoint};
use crate::ecdsa::{dh_client_init, dh_client_complete, dh_server_respond, ApiKeyEcdsa, EcdsaClientEntry};
use crate::eddsa::{ed_client_complete, ed_client_init, ed_server_respond, EdClientEntry, EdPoint};
use crate::encoding::scalar_to_bytes32;
use crate::{KeyId, ProtocolError};

pub const DEFAULT_BATCH_SIZE: usize = 100;
pub const DEFAULT_LOW_WATER: usize = 20;
pub const SECRET_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("nonce pool exhausted")]
    Exhausted,
    #[error("unknown or already consumed nonce point")]
    UnknownPoint,
    #[error("duplicate nonce point")]
    DuplicatePoint,
    #[error("refill count must be at least 1")]
    EmptyBatch,
    #[error("response carries {actual} points for {expected} requested")]
    ResponseLength { expected: usize, actual: usize },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("pool storage: {0}")]
    Storage(String),
    #[error("pool record rejected: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for PoolError {
    fn from(e: std::io::Error) -> Self {
        PoolError::Storage(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub batch_size: usize,
    pub low_water: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { batch_size: DEFAULT_BATCH_SIZE, low_water: DEFAULT_LOW_WATER }
    }
}

/// Anything the client can keep in a pool, identified by its joint point.
pub trait PreparedEntry {
    fn point_bytes(&self) -> Vec<u8>;
}

impl PreparedEntry for EcdsaClientEntry {
    fn point_bytes(&self) -> Vec<u8> {
        self.point.as_bytes().to_vec()
    }
}

impl PreparedEntry for EdClientEntry {
    fn point_bytes(&self) -> Vec<u8> {
        self.point.as_bytes().to_vec()
    }
}

/// An entry removed from a pool, plus whether the pool fell below its
/// low-water mark as a result.
#[derive(Debug)]
pub struct Taken<E> {
    pub entry: E,
    pub refill_needed: bool,
}

/// Client-side pool. Entries leave the map before the caller sees them.
pub struct ClientPool<E> {
    config: PoolConfig,
    entries: Mutex<IndexMap<Vec<u8>, E>>,
}

impl<E> fmt::Debug for ClientPool<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let len = self.entries.lock().map(|e| e.len()).unwrap_or(0);
        f.debug_struct("ClientPool").field("config", &self.config).field("len", &len).finish()
    }
}

impl<E: PreparedEntry> Default for ClientPool<E> {
    fn default() -> Self {
        Self::new(PoolConfig::default())
    }
}

impl<E: PreparedEntry> ClientPool<E> {
    pub fn new(config: PoolConfig) -> Self {
        Self { config, entries: Mutex::new(IndexMap::new()) }
    }

    pub fn config(&self) -> PoolConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("pool lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, point: &[u8]) -> bool {
        self.entries.lock().expect("pool lock").contains_key(point)
    }

    pub fn needs_refill(&self) -> bool {
        self.len() < self.config.low_water
    }

    /// Inserts all entries or none of them.
    pub fn insert_batch(&self, batch: Vec<E>) -> Result<usize, PoolError> {
        let mut entries = self.entries.lock().expect("pool lock");
        let mut seen = HashSet::with_capacity(batch.len());
        for e in &batch {
            let key = e.point_bytes();
            if entries.contains_key(&key) || !seen.insert(key) {
                return Err(PoolError::DuplicatePoint);
            }
        }
        let n = batch.len();
        for e in batch {
            entries.insert(e.point_bytes(), e);
        }
        Ok(n)
    }

    pub fn take(&self) -> Result<Taken<E>, PoolError> {
        let mut entries = self.entries.lock().expect("pool lock");
        let (_, entry) = entries.pop().ok_or(PoolError::Exhausted)?;
        Ok(Taken { entry, refill_needed: entries.len() < self.config.low_water })
    }

    /// Removes the entry for a specific point, if present.
    pub fn take_point(&self, point: &[u8]) -> Option<E> {
        self.entries.lock().expect("pool lock").shift_remove(point)
    }
}

/// What a refill round moved over the wire, counting raw point bytes only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefillOutcome {
    pub requested: usize,
    pub added: usize,
    pub rejected: usize,
    pub bytes_out: usize,
    pub bytes_in: usize,
}

/// One preparation round for ECDSA: `count` values `R2` go out in a single
/// call to `exchange`, which must return one `R1` (or a rejection) per
/// request point in order. Paillier randomness is precomputed for every
/// accepted entry. Nothing is added unless the whole round succeeds.
pub fn refill_ecdsa<R, F, T>(
    pool: &ClientPool<EcdsaClientEntry>,
    key: &ApiKeyEcdsa,
    count: usize,
    rng: &mut R,
    exchange: F,
) -> Result<RefillOutcome, PoolError>
where
    R: RngCore + CryptoRng,
    F: FnOnce(Vec<CurvePoint>) -> Result<Vec<Option<CurvePoint>>, T>,
    T: fmt::Display,
{
    if count == 0 {
        return Err(PoolError::EmptyBatch);
    }
    let curve = key.curve();
    let (secrets, points): (Vec<BigUint>, Vec<CurvePoint>) = (0..count).map(|_| dh_client_init(curve, rng)).unzip();
    let bytes_out = points.iter().map(|p| p.as_bytes().len()).sum();
    let replies = exchange(points).map_err(|e| PoolError::Transport(e.to_string()))?;
    if replies.len() != count {
        return Err(PoolError::ResponseLength { expected: count, actual: replies.len() });
    }
    let mut outcome = RefillOutcome { requested: count, bytes_out, ..Default::default() };
    let mut batch = Vec::with_capacity(count);
    for (k2, reply) in secrets.into_iter().zip(replies) {
        let Some(r1) = reply else {
            outcome.rejected += 1;
            continue;
        };
        outcome.bytes_in += r1.as_bytes().len();
        match dh_client_complete(&k2, &r1) {
            Ok(point) if r1.curve() == curve => {
                let nonce = key.paillier_pk().precompute_nonce(rng);
                batch.push(EcdsaClientEntry { point, k2, nonce });
            }
            _ => outcome.rejected += 1,
        }
    }
    outcome.added = pool.insert_batch(batch)?;
    Ok(outcome)
}

/// EdDSA counterpart of [`refill_ecdsa`], exchanging 32-byte points.
pub fn refill_eddsa<R, F, T>(
    pool: &ClientPool<EdClientEntry>,
    count: usize,
    rng: &mut R,
    exchange: F,
) -> Result<RefillOutcome, PoolError>
where
    R: RngCore + CryptoRng,
    F: FnOnce(Vec<EdPoint>) -> Result<Vec<Option<EdPoint>>, T>,
    T: fmt::Display,
{
    if count == 0 {
        return Err(PoolError::EmptyBatch);
    }
    let (secrets, points): (Vec<Scalar>, Vec<EdPoint>) = (0..count).map(|_| ed_client_init(rng)).unzip();
    let bytes_out = points.iter().map(|p| p.as_bytes().len()).sum();
    let replies = exchange(points).map_err(|e| PoolError::Transport(e.to_string()))?;
    if replies.len() != count {
        return Err(PoolError::ResponseLength { expected: count, actual: replies.len() });
    }
    let mut outcome = RefillOutcome { requested: count, bytes_out, ..Default::default() };
    let mut batch = Vec::with_capacity(count);
    for (r_c, reply) in secrets.into_iter().zip(replies) {
        let Some(server_point) = reply else {
            outcome.rejected += 1;
            continue;
        };
        outcome.bytes_in += server_point.as_bytes().len();
        match ed_client_complete(&r_c, &server_point) {
            Ok(point) => batch.push(EdClientEntry { point, r_c }),
            Err(_) => outcome.rejected += 1,
        }
    }
    outcome.added = pool.insert_batch(batch)?;
    Ok(outcome)
}

/// Server half of an ECDSA preparation round. Every decodable `R2` gets a
/// fresh `k1`; the new entries are persisted as one batch before the
/// replies are returned.
pub fn server_prepare_ecdsa<R: RngCore + CryptoRng>(
    pool: &ServerPool,
    key_id: &KeyId,
    curve: CurveId,
    client_points: &[Vec<u8>],
    rng: &mut R,
) -> Result<Vec<Result<CurvePoint, ProtocolError>>, PoolError> {
    let mut batch = Vec::new();
    let replies = client_points
        .iter()
        .map(|bytes| {
            let r2 = CurvePoint::from_bytes(curve, bytes)?;
            let (k1, r1, r) = dh_server_respond(&r2, rng)?;
            batch.push((r.as_bytes().to_vec(), Zeroizing::new(scalar_to_bytes32(&k1))));
            Ok(r1)
        })
        .collect();
    if !batch.is_empty() {
        pool.add_batch(key_id, batch)?;
    }
    Ok(replies)
}

/// Server half of an EdDSA preparation round.
pub fn server_prepare_eddsa<R: RngCore + CryptoRng>(
    pool: &ServerPool,
    key_id: &KeyId,
    client_points: &[Vec<u8>],
    rng: &mut R,
) -> Result<Vec<Result<EdPoint, ProtocolError>>, PoolError> {
    let mut batch = Vec::new();
    let replies = client_points
        .iter()
        .map(|bytes| {
            let r_c = EdPoint::from_bytes(bytes)?;
            let (r_s, server_point, joint) = ed_server_respond(&r_c, rng)?;
            batch.push((joint.as_bytes().to_vec(), Zeroizing::new(r_s.to_bytes())));
            Ok(server_point)
        })
        .collect();
    if !batch.is_empty() {
        pool.add_batch(key_id, batch)?;
    }
    Ok(replies)
}

/// The exchange's nonce secret for one point: `k1` as 32 big-endian bytes
/// for ECDSA, `r_s` as 32 little-endian bytes for EdDSA.
pub type ServerSecret = Zeroizing<[u8; SECRET_LEN]>;

/// A single pool change as persisted.
#[derive(Clone, PartialEq, Eq)]
pub enum PoolRecord {
    Add { key_id: KeyId, entries: Vec<(Vec<u8>, ServerSecret)> },
    Consume { key_id: KeyId, point: Vec<u8> },
}

impl fmt::Debug for PoolRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolRecord::Add { key_id, entries } => {
                f.debug_struct("Add").field("key_id", key_id).field("entries", &entries.len()).finish()
            }
            PoolRecord::Consume { key_id, point } => f
                .debug_struct("Consume")
                .field("key_id", key_id)
                .field("point", &hex::encode(point))
                .finish(),
        }
    }
}

/// Durable backing for a [`ServerPool`].
pub trait PoolStore: Send {
    /// Every record written so far, in order.
    fn load(&mut self) -> Result<Vec<PoolRecord>, PoolError>;
    /// Durably appends one record. A record is either fully present after a
    /// crash or absent.
    fn append(&mut self, record: &PoolRecord) -> Result<(), PoolError>;
    /// Replaces the log with an equivalent, shorter one.
    fn compact(&mut self, records: &[PoolRecord]) -> Result<(), PoolError>;
}

/// In-memory store. Clones share the same log, so dropping a pool and
/// reopening it from a clone models a process restart.
#[derive(Clone, Default)]
pub struct MemoryStore {
    log: Arc<Mutex<Vec<PoolRecord>>>,
    fail_appends: Arc<Mutex<bool>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes subsequent appends fail until switched off again.
    pub fn set_fail_appends(&self, fail: bool) {
        *self.fail_appends.lock().expect("store lock") = fail;
    }

    pub fn records(&self) -> Vec<PoolRecord> {
        self.log.lock().expect("store lock").clone()
    }
}

impl fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryStore").field("records", &self.log.lock().map(|l| l.len()).unwrap_or(0)).finish()
    }
}

impl PoolStore for MemoryStore {
    fn load(&mut self) -> Result<Vec<PoolRecord>, PoolError> {
        Ok(self.records())
    }

    fn append(&mut self, record: &PoolRecord) -> Result<(), PoolError> {
        if *self.fail_appends.lock().expect("store lock") {
            return Err(PoolError::Storage("injected append failure".into()));
        }
        self.log.lock().expect("store lock").push(record.clone());
        Ok(())
    }

    fn compact(&mut self, records: &[PoolRecord]) -> Result<(), PoolError> {
        *self.log.lock().expect("store lock") = records.to_vec();
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum WireRecord {
    Add { key_id: KeyId, entries: Vec<WireEntry> },
    Consume { key_id: KeyId, r: String },
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    r: String,
    secret: String,
}

const AEAD_NONCE_LEN: usize = 12;

/// Append-only JSON-lines file. Secrets are sealed with ChaCha20-Poly1305
/// under a local key, bound to their key id and point. Each append is
/// flushed and synced before it returns.
pub struct FileStore {
    path: PathBuf,
    cipher: ChaCha20Poly1305,
    file: Option<File>,
}

impl fmt::Debug for FileStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FileStore").field("path", &self.path).finish_non_exhaustive()
    }
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>, key: &[u8; 32]) -> Result<Self, PoolError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Ok(Self { path, cipher: ChaCha20Poly1305::new(key.into()), file: None })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn aad(key_id: &KeyId, point: &[u8]) -> Vec<u8> {
        let mut aad = key_id.as_str().as_bytes().to_vec();
        aad.push(0);
        aad.extend_from_slice(point);
        aad
    }

    fn seal(&self, key_id: &KeyId, point: &[u8], secret: &[u8; SECRET_LEN]) -> Result<String, PoolError> {
        let mut nonce = [0u8; AEAD_NONCE_LEN];
        rand::rngs::OsRng.fill_bytes(&mut nonce);
        let aad = Self::aad(key_id, point);
        let sealed = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: secret, aad: &aad })
            .map_err(|_| PoolError::Storage("encryption failed".into()))?;
        let mut out = nonce.to_vec();
        out.extend_from_slice(&sealed);
        Ok(hex::encode(out))
    }

    fn open_sealed(&self, key_id: &KeyId, point: &[u8], sealed: &str) -> Result<ServerSecret, PoolError> {
        let bytes = hex::decode(sealed).map_err(|_| PoolError::Corrupt("secret is not hex".into()))?;
        if bytes.len() < AEAD_NONCE_LEN {
            return Err(PoolError::Corrupt("sealed secret too short".into()));
        }
        let (nonce, ct) = bytes.split_at(AEAD_NONCE_LEN);
        let aad = Self::aad(key_id, point);
        let plain = Zeroizing::new(
            self.cipher
                .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad: &aad })
                .map_err(|_| PoolError::Corrupt("secret failed authentication".into()))?,
        );
        let arr: [u8; SECRET_LEN] =
            plain.as_slice().try_into().map_err(|_| PoolError::Corrupt("secret has wrong length".into()))?;
        Ok(Zeroizing::new(arr))
    }

    fn encode(&self, record: &PoolRecord) -> Result<String, PoolError> {
        let wire = match record {
            PoolRecord::Add { key_id, entries } => WireRecord::Add {
                key_id: key_id.clone(),
                entries: entries
                    .iter()
                    .map(|(point, secret)| {
                        Ok(WireEntry { r: hex::encode(point), secret: self.seal(key_id, point, secret)? })
                    })
                    .collect::<Result<_, PoolError>>()?,
            },
            PoolRecord::Consume { key_id, point } => {
                WireRecord::Consume { key_id: key_id.clone(), r: hex::encode(point) }
            }
        };
        let mut line = serde_json::to_string(&wire).map_err(|e| PoolError::Storage(e.to_string()))?;
        line.push('\n');
        Ok(line)
    }

    fn decode(&self, line: &str) -> Result<PoolRecord, PoolError> {
        let wire: WireRecord = serde_json::from_str(line).map_err(|e| PoolError::Corrupt(e.to_string()))?;
        let unhex = |s: &str| hex::decode(s).map_err(|_| PoolError::Corrupt("point is not hex".into()));
        Ok(match wire {
            WireRecord::Add { key_id, entries } => {
                let entries = entries
                    .into_iter()
                    .map(|e| {
                        let point = unhex(&e.r)?;
                        let secret = self.open_sealed(&key_id, &point, &e.secret)?;
                        Ok((point, secret))
                    })
                    .collect::<Result<_, PoolError>>()?;
                PoolRecord::Add { key_id, entries }
            }
            WireRecord::Consume { key_id, r } => PoolRecord::Consume { key_id, point: unhex(&r)? },
        })
    }

    fn handle(&mut self) -> Result<&mut File, PoolError> {
        if self.file.is_none() {
            let f = OpenOptions::new().create(true).append(true).open(&self.path)?;
            self.file = Some(f);
        }
        Ok(self.file.as_mut().expect("just opened"))
    }
}

impl PoolStore for FileStore {
    fn load(&mut self) -> Result<Vec<PoolRecord>, PoolError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut lines = Vec::new();
        let mut reader = BufReader::new(file);
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            lines.push(line);
        }
        let mut records = Vec::with_capacity(lines.len());
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            // An unterminated final line is a write cut short by a crash.
            if i == last && !line.ends_with('\n') {
                log::warn!("dropping torn final record in {}", self.path.display());
                break;
            }
            if line.trim().is_empty() {
                continue;
            }
            records.push(self.decode(line.trim_end())?);
        }
        Ok(records)
    }

    fn append(&mut self, record: &PoolRecord) -> Result<(), PoolError> {
        let line = self.encode(record)?;
        let file = self.handle()?;
        file.write_all(line.as_bytes())?;
        file.flush()?;
        file.sync_data()?;
        Ok(())
    }

    fn compact(&mut self, records: &[PoolRecord]) -> Result<(), PoolError> {
        let mut body = String::new();
        for r in records {
            body.push_str(&self.encode(r)?);
        }
        let tmp = self.path.with_extension("compact.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(body.as_bytes())?;
            f.sync_all()?;
        }
        self.file = None;
        fs::rename(&tmp, &self.path)?;
        if let Some(dir) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        Ok(())
    }
}

type Slot = (KeyId, Vec<u8>);

#[derive(Default)]
struct ServerState {
    live: HashMap<Slot, ServerSecret>,
    consumed: HashSet<Slot>,
    per_key: HashMap<KeyId, usize>,
}

impl ServerState {
    fn apply(&mut self, record: PoolRecord) {
        match record {
            PoolRecord::Add { key_id, entries } => {
                for (point, secret) in entries {
                    let slot = (key_id.clone(), point);
                    if !self.consumed.contains(&slot) && self.live.insert(slot, secret).is_none() {
                        *self.per_key.entry(key_id.clone()).or_default() += 1;
                    }
                }
            }
            PoolRecord::Consume { key_id, point } => {
                let slot = (key_id, point);
                self.remove_live(&slot);
                self.consumed.insert(slot);
            }
        }
    }

    fn remove_live(&mut self, slot: &Slot) -> Option<ServerSecret> {
        let secret = self.live.remove(slot)?;
        if let Some(n) = self.per_key.get_mut(&slot.0) {
            *n -= 1;
            if *n == 0 {
                self.per_key.remove(&slot.0);
            }
        }
        Some(secret)
    }

    /// Live entries grouped per key, followed by every tombstone.
    fn snapshot(&self) -> Vec<PoolRecord> {
        let mut by_key: IndexMap<KeyId, Vec<(Vec<u8>, ServerSecret)>> = IndexMap::new();
        let mut live: Vec<_> = self.live.iter().collect();
        live.sort_by(|a, b| a.0.cmp(b.0));
        for ((key_id, point), secret) in live {
            by_key.entry(key_id.clone()).or_default().push((point.clone(), secret.clone()));
        }
        let mut out: Vec<PoolRecord> =
            by_key.into_iter().map(|(key_id, entries)| PoolRecord::Add { key_id, entries }).collect();
        let mut dead: Vec<_> = self.consumed.iter().collect();
        dead.sort();
        out.extend(dead.into_iter().map(|(key_id, point)| PoolRecord::Consume { key_id: key_id.clone(), point: point.clone() }));
        out
    }
}

struct ServerInner {
    state: ServerState,
    store: Box<dyn PoolStore>,
}

/// Exchange-side pool of nonce secrets, scoped per API key.
pub struct ServerPool {
    inner: Mutex<ServerInner>,
}

impl fmt::Debug for ServerPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerPool").field("live", &self.total_len()).finish()
    }
}

impl ServerPool {
    /// Replays the store, then compacts it.
    pub fn open(mut store: Box<dyn PoolStore>) -> Result<Self, PoolError> {
        let mut state = ServerState::default();
        for record in store.load()? {
            state.apply(record);
        }
        store.compact(&state.snapshot())?;
        Ok(Self { inner: Mutex::new(ServerInner { state, store }) })
    }

    pub fn in_memory() -> Self {
        Self::open(Box::new(MemoryStore::new())).expect("memory store cannot fail")
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ServerInner> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Persists and then inserts the whole batch, or nothing.
    pub fn add_batch(&self, key_id: &KeyId, entries: Vec<(Vec<u8>, ServerSecret)>) -> Result<usize, PoolError> {
        if entries.is_empty() {
            return Err(PoolError::EmptyBatch);
        }
        let mut inner = self.lock();
        let mut seen = HashSet::with_capacity(entries.len());
        for (point, _) in &entries {
            let slot = (key_id.clone(), point.clone());
            if inner.state.live.contains_key(&slot) || inner.state.consumed.contains(&slot) || !seen.insert(point) {
                return Err(PoolError::DuplicatePoint);
            }
        }
        let n = entries.len();
        let record = PoolRecord::Add { key_id: key_id.clone(), entries };
        inner.store.append(&record)?;
        inner.state.apply(record);
        Ok(n)
    }

    /// Removes and returns the secret for `(key_id, point)`. The tombstone
    /// is persisted first; if that fails the entry is discarded anyway and
    /// the error is returned, so a point is never handed out twice.
    pub fn consume(&self, key_id: &KeyId, point: &[u8]) -> Result<ServerSecret, PoolError> {
        let mut inner = self.lock();
        let slot = (key_id.clone(), point.to_vec());
        if !inner.state.live.contains_key(&slot) {
            return Err(PoolError::UnknownPoint);
        }
        let record = PoolRecord::Consume { key_id: key_id.clone(), point: point.to_vec() };
        let persisted = inner.store.append(&record);
        let secret = inner.state.remove_live(&slot).expect("checked above");
        inner.state.consumed.insert(slot);
        persisted.map(|()| secret)
    }

    pub fn len(&self, key_id: &KeyId) -> usize {
        self.lock().state.per_key.get(key_id).copied().unwrap_or(0)
    }

    pub fn total_len(&self) -> usize {
        self.lock().state.live.len()
    }

    pub fn contains(&self, key_id: &KeyId, point: &[u8]) -> bool {
        self.lock().state.live.contains_key(&(key_id.clone(), point.to_vec()))
    }

    pub fn is_consumed(&self, key_id: &KeyId, point: &[u8]) -> bool {
        self.lock().state.consumed.contains(&(key_id.clone(), point.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    fn kid(s: &str) -> KeyId {
        KeyId::parse(s).unwrap()
    }

    fn secret(b: u8) -> ServerSecret {
        Zeroizing::new([b; 32])
    }

    #[test]
    fn consume_is_single_use_and_scoped() {
        let pool = ServerPool::in_memory();
        pool.add_batch(&kid("a"), vec![(vec![1], secret(1)), (vec![2], secret(2))]).unwrap();
        assert_eq!(pool.len(&kid("a")), 2);
        assert_eq!(pool.consume(&kid("b"), &[1]).unwrap_err(), PoolError::UnknownPoint);
        assert_eq!(*pool.consume(&kid("a"), &[1]).unwrap(), [1u8; 32]);
        assert_eq!(pool.consume(&kid("a"), &[1]).unwrap_err(), PoolError::UnknownPoint);
        assert_eq!(pool.len(&kid("a")), 1);
    }

    #[test]
    fn batches_are_atomic() {
        let pool = ServerPool::in_memory();
        pool.add_batch(&kid("a"), vec![(vec![1], secret(1))]).unwrap();
        let err = pool.add_batch(&kid("a"), vec![(vec![2], secret(2)), (vec![1], secret(9))]).unwrap_err();
        assert_eq!(err, PoolError::DuplicatePoint);
        assert!(!pool.contains(&kid("a"), &[2]));
        assert_eq!(pool.add_batch(&kid("a"), vec![]).unwrap_err(), PoolError::EmptyBatch);
    }

    #[test]
    fn consumed_point_cannot_return() {
        let pool = ServerPool::in_memory();
        pool.add_batch(&kid("a"), vec![(vec![7], secret(7))]).unwrap();
        pool.consume(&kid("a"), &[7]).unwrap();
        assert_eq!(pool.add_batch(&kid("a"), vec![(vec![7], secret(7))]).unwrap_err(), PoolError::DuplicatePoint);
    }

    #[test]
    fn failed_append_commits_nothing() {
        let store = MemoryStore::new();
        let pool = ServerPool::open(Box::new(store.clone())).unwrap();
        store.set_fail_appends(true);
        assert!(matches!(pool.add_batch(&kid("a"), vec![(vec![1], secret(1))]), Err(PoolError::Storage(_))));
        assert_eq!(pool.total_len(), 0);
    }

    #[test]
    fn failed_tombstone_still_burns_point() {
        let store = MemoryStore::new();
        let pool = ServerPool::open(Box::new(store.clone())).unwrap();
        pool.add_batch(&kid("a"), vec![(vec![1], secret(1))]).unwrap();
        store.set_fail_appends(true);
        assert!(pool.consume(&kid("a"), &[1]).is_err());
        store.set_fail_appends(false);
        assert_eq!(pool.consume(&kid("a"), &[1]).unwrap_err(), PoolError::UnknownPoint);
    }

    #[derive(Debug)]
    struct Dummy(u8);
    impl PreparedEntry for Dummy {
        fn point_bytes(&self) -> Vec<u8> {
            vec![self.0]
        }
    }

    #[test]
    fn client_take_signals_low_water() {
        let pool = ClientPool::new(PoolConfig { batch_size: 4, low_water: 2 });
        pool.insert_batch((0..3).map(Dummy).collect()).unwrap();
        let a = pool.take().unwrap();
        assert!(!a.refill_needed);
        let b = pool.take().unwrap();
        assert!(b.refill_needed);
        assert_ne!(a.entry.0, b.entry.0);
        pool.take().unwrap();
        assert_eq!(pool.take().unwrap_err(), PoolError::Exhausted);
    }

    #[test]
    fn client_batch_rejects_duplicates_atomically() {
        let pool = ClientPool::<Dummy>::default();
        assert_eq!(pool.insert_batch(vec![Dummy(1), Dummy(1)]).unwrap_err(), PoolError::DuplicatePoint);
        assert!(pool.is_empty());
    }

    #[test]
    fn eddsa_round_trip_through_helpers() {
        let server = ServerPool::in_memory();
        let client = ClientPool::<EdClientEntry>::default();
        let key = kid("k");
        let mut calls = 0;
        let outcome = refill_eddsa(&client, 10, &mut OsRng, |points| {
            calls += 1;
            let bytes: Vec<Vec<u8>> = points.iter().map(|p| p.as_bytes().to_vec()).collect();
            let replies = server_prepare_eddsa(&server, &key, &bytes, &mut OsRng).map_err(|e| e.to_string())?;
            Ok::<_, String>(replies.into_iter().map(Result::ok).collect())
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!((outcome.added, outcome.bytes_out, outcome.bytes_in), (10, 320, 320));
        assert_eq!(server.len(&key), 10);
        let taken = client.take().unwrap().entry;
        assert!(server.contains(&key, taken.point.as_bytes()));
    }

    #[test]
    fn transport_failure_leaves_pool_unchanged() {
        let client = ClientPool::<EdClientEntry>::default();
        let err = refill_eddsa(&client, 5, &mut OsRng, |_| Err::<Vec<Option<EdPoint>>, _>("down")).unwrap_err();
        assert_eq!(err, PoolError::Transport("down".into()));
        assert!(client.is_empty());
        assert_eq!(refill_eddsa(&client, 0, &mut OsRng, |_| Ok::<_, String>(vec![])).unwrap_err(), PoolError::EmptyBatch);
    }
}
