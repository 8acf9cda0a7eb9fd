use std::collections::HashMap;
use std::net::IpAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use apikey_core::account::AccountPublicKey;
use apikey_core::curve::CurvePoint;
use apikey_core::ecdsa::{complete_signature, required_paillier_bits, CompletionOptions, Presignature};
use apikey_core::eddsa::{decrypt_server_share, ed_server_complete, EdPartialSignature, EdPoint};
use apikey_core::message::{digest_scalar, message_digest};
use apikey_core::paillier::{KeyCorrectnessProof, PaillierSecretKey, ProofParams};
use apikey_core::policy::{
    evaluate, record_usage, update_policy, PolicyError, SignContext, SignedPolicy, Stage, UsageEvent, UsageLedger,
    Verdict,
};
use apikey_core::pool::{
    server_prepare_ecdsa, server_prepare_eddsa, FileStore, PoolError, ServerPool,
};
use apikey_core::wire::{
    cancel_message, CancelRequest, ErrorCode, Handler, PointReply, PolicyUpdateRequest, PrepareRequest,
    RegisterRequest, Request, Response, SignRequest, TicketInfo, TicketState,
};
use apikey_core::{KeyId, Scheme};
use curve25519_dalek::scalar::Scalar;
use num_bigint::BigUint;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::clock::Clock;
use crate::journal::Journal;

/// Largest number of points accepted in one preparation request.
pub const MAX_PREPARE_BATCH: usize = 10_000;

const REGISTRATIONS: &str = "registrations";
const LEDGER: &str = "ledger";
const TICKETS: &str = "tickets";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("exchange key does not match its correctness proof: {0}")]
    Proof(String),
    #[error("journal replay failed: {0}")]
    Replay(String),
}

/// Where the exchange keeps its state.
#[derive(Clone, Debug)]
pub enum Storage {
    Memory,
    Dir { path: PathBuf, pool_key: [u8; 32] },
}

enum RegisteredKey {
    Ecdsa { public_key: CurvePoint },
    Eddsa { public_key: EdPoint, server_share: Zeroizing<Scalar> },
}

struct Registration {
    request: RegisterRequest,
    key: RegisteredKey,
    policy: SignedPolicy,
}

impl Registration {
    fn account_key(&self) -> &AccountPublicKey {
        &self.policy.policy.account_key
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum RegistrationRecord {
    Register(RegisterRequest),
    Policy { key_id: KeyId, policy: SignedPolicy },
}

#[derive(Serialize, Deserialize)]
struct LedgerRecord {
    key_id: KeyId,
    event: UsageEvent,
}

#[derive(Clone, Serialize, Deserialize)]
struct Ticket {
    info: TicketInfo,
    request: SignRequest,
    context: SignContext,
}

enum Payload {
    Ecdsa(Presignature),
    Eddsa(EdPartialSignature),
}

impl Payload {
    fn point_bytes(&self) -> Vec<u8> {
        match self {
            Payload::Ecdsa(p) => p.point.as_bytes().to_vec(),
            Payload::Eddsa(p) => p.point.as_bytes().to_vec(),
        }
    }
}

/// The exchange. All request handling goes through [`Handler::handle`] or
/// the `handle_*` methods; none of them ever sees a full signing key.
pub struct ExchangeService {
    paillier: PaillierSecretKey,
    proof: KeyCorrectnessProof,
    registrations: RwLock<HashMap<KeyId, Arc<Registration>>>,
    pool: ServerPool,
    ledgers: Mutex<HashMap<KeyId, UsageLedger>>,
    tickets: Mutex<HashMap<String, Ticket>>,
    key_locks: Mutex<HashMap<KeyId, Arc<Mutex<()>>>>,
    journal: Option<Journal>,
    clock: Arc<dyn Clock>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn err(code: ErrorCode, message: impl Into<String>) -> Response {
    Response::error(code, message)
}

impl ExchangeService {
    /// Opens the service, replaying any persisted state. The proof must
    /// verify for the Paillier key under the proof's own parameters.
    pub fn open(
        paillier: PaillierSecretKey,
        proof: KeyCorrectnessProof,
        storage: Storage,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        proof.verify(paillier.public_key(), proof.params).map_err(|e| ServiceError::Proof(e.to_string()))?;
        let (pool, journal) = match &storage {
            Storage::Memory => (ServerPool::in_memory(), None),
            Storage::Dir { path, pool_key } => {
                let store = FileStore::open(path.join("pool.jsonl"), pool_key)?;
                (ServerPool::open(Box::new(store))?, Some(Journal::open(path)?))
            }
        };
        let service = Self {
            paillier,
            proof,
            registrations: RwLock::new(HashMap::new()),
            pool,
            ledgers: Mutex::new(HashMap::new()),
            tickets: Mutex::new(HashMap::new()),
            key_locks: Mutex::new(HashMap::new()),
            journal,
            clock,
        };
        service.replay()?;
        Ok(service)
    }

    fn replay(&self) -> Result<(), ServiceError> {
        let Some(journal) = &self.journal else {
            return Ok(());
        };
        for record in journal.load::<RegistrationRecord>(REGISTRATIONS)? {
            match record {
                RegistrationRecord::Register(req) => {
                    let reg = self.admit(req).map_err(|r| ServiceError::Replay(format!("{r:?}")))?;
                    self.write_registrations().insert(reg.request.key_id.clone(), Arc::new(reg));
                }
                RegistrationRecord::Policy { key_id, policy } => {
                    let mut regs = self.write_registrations();
                    let current = regs.get(&key_id).ok_or_else(|| ServiceError::Replay(format!("policy for unknown {key_id}")))?;
                    let next = Registration { request: current.request.clone(), key: clone_key(&current.key), policy };
                    regs.insert(key_id, Arc::new(next));
                }
            }
        }
        let mut ledgers = lock(&self.ledgers);
        for LedgerRecord { key_id, event } in journal.load::<LedgerRecord>(LEDGER)? {
            ledgers.entry(key_id).or_default().push(event);
        }
        drop(ledgers);
        let mut tickets = lock(&self.tickets);
        for t in journal.load::<Ticket>(TICKETS)? {
            tickets.insert(t.info.ticket_id.clone(), t);
        }
        Ok(())
    }

    fn write_registrations(&self) -> std::sync::RwLockWriteGuard<'_, HashMap<KeyId, Arc<Registration>>> {
        self.registrations.write().unwrap_or_else(|p| p.into_inner())
    }

    fn registration(&self, key_id: &KeyId) -> Option<Arc<Registration>> {
        self.registrations.read().unwrap_or_else(|p| p.into_inner()).get(key_id).cloned()
    }

    fn key_lock(&self, key_id: &KeyId) -> Arc<Mutex<()>> {
        lock(&self.key_locks).entry(key_id.clone()).or_default().clone()
    }

    fn persist<T: Serialize>(&self, name: &'static str, record: &T) -> Result<(), Response> {
        match &self.journal {
            Some(j) => j.append(name, record).map_err(|e| err(ErrorCode::Storage, e.to_string())),
            None => Ok(()),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn paillier_proof(&self) -> &KeyCorrectnessProof {
        &self.proof
    }

    pub fn proof_params(&self) -> ProofParams {
        self.proof.params
    }

    pub fn pool(&self) -> &ServerPool {
        &self.pool
    }

    pub fn pool_len(&self, key_id: &KeyId) -> usize {
        self.pool.len(key_id)
    }

    pub fn is_registered(&self, key_id: &KeyId) -> bool {
        self.registration(key_id).is_some()
    }

    pub fn policy(&self, key_id: &KeyId) -> Option<SignedPolicy> {
        self.registration(key_id).map(|r| r.policy.clone())
    }

    pub fn ledger(&self, key_id: &KeyId) -> UsageLedger {
        lock(&self.ledgers).get(key_id).cloned().unwrap_or_default()
    }

    pub fn ticket(&self, ticket_id: &str) -> Option<TicketInfo> {
        lock(&self.tickets).get(ticket_id).map(|t| t.info.clone())
    }

    pub fn pending_tickets(&self) -> usize {
        lock(&self.tickets).values().filter(|t| t.info.state == TicketState::Pending).count()
    }

    /// Validates a registration without storing it.
    fn admit(&self, req: RegisterRequest) -> Result<Registration, Response> {
        req.policy.verify().map_err(policy_error)?;
        let pk_bytes = hex::decode(&req.public_key).map_err(|e| err(ErrorCode::Malformed, format!("public_key: {e}")))?;
        let key = match req.scheme {
            Scheme::Ecdsa => {
                let required = required_paillier_bits(req.curve);
                if self.paillier.public_key().bits() <= required {
                    return Err(err(
                        ErrorCode::Malformed,
                        format!("exchange Paillier key is too small for {}", req.curve),
                    ));
                }
                let public_key = CurvePoint::from_bytes(req.curve, &pk_bytes)
                    .map_err(|e| err(ErrorCode::Malformed, format!("public_key: {e}")))?;
                RegisteredKey::Ecdsa { public_key }
            }
            Scheme::Eddsa => {
                let public_key =
                    EdPoint::from_bytes(&pk_bytes).map_err(|e| err(ErrorCode::Malformed, format!("public_key: {e}")))?;
                let enc = req
                    .enc_server_share
                    .as_deref()
                    .ok_or_else(|| err(ErrorCode::Malformed, "EdDSA registration needs enc_server_share"))?;
                let ct = self
                    .paillier
                    .public_key()
                    .ciphertext_from_hex(enc)
                    .map_err(|e| err(ErrorCode::Malformed, format!("enc_server_share: {e}")))?;
                let share = decrypt_server_share(&self.paillier, &ct)
                    .map_err(|e| err(ErrorCode::Malformed, format!("enc_server_share: {e}")))?;
                RegisteredKey::Eddsa { public_key, server_share: Zeroizing::new(share) }
            }
        };
        let policy = req.policy.clone();
        Ok(Registration { request: req, key, policy })
    }

    pub fn handle_register(&self, req: RegisterRequest) -> Response {
        let mut regs = self.write_registrations();
        if regs.contains_key(&req.key_id) {
            return err(ErrorCode::DuplicateKey, format!("key {} is already registered", req.key_id));
        }
        let reg = match self.admit(req) {
            Ok(r) => r,
            Err(resp) => return resp,
        };
        if let Err(resp) = self.persist(REGISTRATIONS, &RegistrationRecord::Register(reg.request.clone())) {
            return resp;
        }
        let key_id = reg.request.key_id.clone();
        regs.insert(key_id.clone(), Arc::new(reg));
        log::info!("registered {key_id}");
        Response::Registered { key_id }
    }

    pub fn handle_prepare(&self, req: PrepareRequest) -> Response {
        let Some(reg) = self.registration(&req.key_id) else {
            return err(ErrorCode::UnknownKey, format!("unknown key {}", req.key_id));
        };
        if req.points.is_empty() || req.points.len() > MAX_PREPARE_BATCH {
            return err(ErrorCode::Malformed, format!("between 1 and {MAX_PREPARE_BATCH} points per request"));
        }
        let decoded: Vec<Result<Vec<u8>, String>> =
            req.points.iter().map(|p| hex::decode(p).map_err(|e| format!("invalid hex: {e}"))).collect();
        let valid: Vec<Vec<u8>> = decoded.iter().filter_map(|d| d.as_ref().ok().cloned()).collect();
        let replies: Vec<Result<String, String>> = match &reg.key {
            RegisteredKey::Ecdsa { public_key } => {
                match server_prepare_ecdsa(&self.pool, &req.key_id, public_key.curve(), &valid, &mut OsRng) {
                    Ok(r) => r.into_iter().map(|x| x.map(|p| p.to_hex()).map_err(|e| e.to_string())).collect(),
                    Err(e) => return err(ErrorCode::Storage, e.to_string()),
                }
            }
            RegisteredKey::Eddsa { .. } => match server_prepare_eddsa(&self.pool, &req.key_id, &valid, &mut OsRng) {
                Ok(r) => r.into_iter().map(|x| x.map(|p| p.to_hex()).map_err(|e| e.to_string())).collect(),
                Err(e) => return err(ErrorCode::Storage, e.to_string()),
            },
        };
        let mut replies = replies.into_iter();
        let points = decoded
            .into_iter()
            .map(|d| match d.and_then(|_| replies.next().expect("one reply per valid point")) {
                Ok(point) => PointReply { point: Some(point), error: None },
                Err(e) => PointReply { point: None, error: Some(e) },
            })
            .collect();
        Response::Prepared { points }
    }

    fn parse_payload(&self, reg: &Registration, payload: &[u8]) -> Result<Payload, Response> {
        let bad = |e: String| err(ErrorCode::Malformed, format!("payload: {e}"));
        match &reg.key {
            RegisteredKey::Ecdsa { public_key } => {
                Presignature::from_bytes(self.paillier.public_key(), public_key.curve(), payload)
                    .map(Payload::Ecdsa)
                    .map_err(|e| bad(e.to_string()))
            }
            RegisteredKey::Eddsa { .. } => {
                EdPartialSignature::from_bytes(payload).map(Payload::Eddsa).map_err(|e| bad(e.to_string()))
            }
        }
    }

    /// Runs the signing pipeline for one request.
    pub fn handle_sign(&self, req: SignRequest, peer: Option<IpAddr>) -> Response {
        let Some(reg) = self.registration(&req.key_id) else {
            return err(ErrorCode::UnknownKey, format!("unknown key {}", req.key_id));
        };
        let message = match hex::decode(&req.message) {
            Ok(m) => m,
            Err(e) => return err(ErrorCode::Malformed, format!("message: {e}")),
        };
        let payload = match hex::decode(&req.payload) {
            Ok(p) => match self.parse_payload(&reg, &p) {
                Ok(p) => p,
                Err(resp) => return resp,
            },
            Err(e) => return err(ErrorCode::Malformed, format!("payload: {e}")),
        };

        let key_lock = self.key_lock(&req.key_id);
        let _serial = lock(&key_lock);
        let now = self.clock.now_ms();
        let ctx = SignContext {
            api_key_id: req.key_id.clone(),
            action: req.action.clone(),
            source_ip: peer,
            device_id: req.device_id.clone(),
            attributes: req.attributes.clone(),
            timestamp_ms: now,
        };
        let verdict = {
            let ledgers = lock(&self.ledgers);
            let empty = UsageLedger::new();
            evaluate(&reg.policy.policy, &ctx, ledgers.get(&req.key_id).unwrap_or(&empty), now, Stage::Request)
        };
        match verdict {
            Verdict::Deny { code, message } => Response::Denied { code, message },
            Verdict::Defer { release_at_ms } => self.defer(req, ctx, release_at_ms),
            Verdict::Allow => match self.finalize(&reg, &message, payload, &ctx, &verdict) {
                Ok((signature, signature_id)) => Response::Signed { signature, signature_id },
                Err(resp) => resp,
            },
        }
    }

    fn defer(&self, request: SignRequest, context: SignContext, release_at_ms: u64) -> Response {
        let mut id = [0u8; 16];
        OsRng.fill_bytes(&mut id);
        let ticket_id = hex::encode(id);
        let ticket = Ticket {
            info: TicketInfo {
                ticket_id: ticket_id.clone(),
                key_id: request.key_id.clone(),
                release_at_ms,
                state: TicketState::Pending,
            },
            request,
            context,
        };
        if let Err(resp) = self.persist(TICKETS, &ticket) {
            return resp;
        }
        lock(&self.tickets).insert(ticket_id.clone(), ticket);
        Response::Deferred { ticket_id, release_at_ms }
    }

    /// Steps after the policy: consume the point, complete, verify, record.
    /// Returns the signature hex and its id.
    fn finalize(
        &self,
        reg: &Registration,
        message: &[u8],
        payload: Payload,
        ctx: &SignContext,
        verdict: &Verdict,
    ) -> Result<(String, String), Response> {
        let key_id = &ctx.api_key_id;
        let point = payload.point_bytes();
        let secret = self.pool.consume(key_id, &point).map_err(|e| match e {
            PoolError::UnknownPoint => err(ErrorCode::ReplayedPoint, "nonce point unknown or already used"),
            other => err(ErrorCode::Storage, other.to_string()),
        })?;
        let signature = match (&reg.key, payload) {
            (RegisteredKey::Ecdsa { public_key }, Payload::Ecdsa(presig)) => {
                let k1 = BigUint::from_bytes_be(secret.as_slice());
                drop(secret);
                let m = digest_scalar(public_key.curve(), &message_digest(message));
                complete_signature(&self.paillier, k1, &presig, &m, public_key, CompletionOptions::default())
                    .map(|sig| hex::encode(sig.to_bytes()))
                    .map_err(|e| err(ErrorCode::VerificationFailed, e.to_string()))?
            }
            (RegisteredKey::Eddsa { public_key, server_share }, Payload::Eddsa(partial)) => {
                let r_s = Option::<Scalar>::from(Scalar::from_canonical_bytes(*secret))
                    .ok_or_else(|| err(ErrorCode::Internal, "stored nonce is not a scalar"))?;
                drop(secret);
                ed_server_complete(server_share, r_s, &partial, message, public_key)
                    .map(|sig| sig.to_hex())
                    .map_err(|e| err(ErrorCode::VerificationFailed, e.to_string()))?
            }
            _ => return Err(err(ErrorCode::Internal, "payload does not match key scheme")),
        };
        let signature_id = format!("{}:{}", key_id, hex::encode(&point));
        let event = {
            let mut ledgers = lock(&self.ledgers);
            let ledger = ledgers.entry(key_id.clone()).or_default();
            record_usage(ledger, ctx, verdict, &signature_id).then(|| ledger.events().last().cloned()).flatten()
        };
        if let Some(event) = event {
            self.persist(LEDGER, &LedgerRecord { key_id: key_id.clone(), event })?;
        }
        Ok((signature, signature_id))
    }

    /// Releases every pending ticket whose time has come. Limits are
    /// checked again against the policy and usage at release time.
    pub fn process_due(&self) -> usize {
        let now = self.clock.now_ms();
        let due: Vec<String> = lock(&self.tickets)
            .values()
            .filter(|t| t.info.state == TicketState::Pending && t.info.release_at_ms <= now)
            .map(|t| t.info.ticket_id.clone())
            .collect();
        due.iter().filter(|id| self.release(id, now)).count()
    }

    fn release(&self, ticket_id: &str, now: u64) -> bool {
        let Some(key_id) = lock(&self.tickets).get(ticket_id).map(|t| t.info.key_id.clone()) else {
            return false;
        };
        let key_lock = self.key_lock(&key_id);
        let _serial = lock(&key_lock);
        let Some(mut ticket) = lock(&self.tickets).get(ticket_id).cloned() else {
            return false;
        };
        if ticket.info.state != TicketState::Pending || ticket.info.release_at_ms > now {
            return false;
        }
        let state = match self.registration(&key_id) {
            None => TicketState::Failed { reason: "key no longer registered".into() },
            Some(reg) => {
                let ctx = SignContext { timestamp_ms: now, ..ticket.context.clone() };
                let verdict = {
                    let ledgers = lock(&self.ledgers);
                    let empty = UsageLedger::new();
                    evaluate(&reg.policy.policy, &ctx, ledgers.get(&key_id).unwrap_or(&empty), now, Stage::Release)
                };
                match verdict {
                    Verdict::Allow => {
                        let outcome = hex::decode(&ticket.request.message)
                            .map_err(|e| err(ErrorCode::Malformed, e.to_string()))
                            .and_then(|m| {
                                let p = hex::decode(&ticket.request.payload)
                                    .map_err(|e| err(ErrorCode::Malformed, e.to_string()))?;
                                let payload = self.parse_payload(&reg, &p)?;
                                self.finalize(&reg, &m, payload, &ctx, &verdict)
                            });
                        match outcome {
                            Ok((signature, _)) => TicketState::Released { signature },
                            Err(resp) => TicketState::Failed { reason: response_reason(&resp) },
                        }
                    }
                    Verdict::Deny { code, message } => {
                        TicketState::Failed { reason: format!("{}: {message}", serde_json::to_string(&code).unwrap_or_default()) }
                    }
                    Verdict::Defer { .. } => return false,
                }
            }
        };
        ticket.info.state = state;
        if let Err(resp) = self.persist(TICKETS, &ticket) {
            log::error!("could not persist ticket {ticket_id}: {resp:?}");
        }
        lock(&self.tickets).insert(ticket_id.to_owned(), ticket);
        true
    }

    pub fn handle_cancel(&self, req: CancelRequest) -> Response {
        let Some(key_id) = lock(&self.tickets).get(&req.ticket_id).map(|t| t.info.key_id.clone()) else {
            return err(ErrorCode::UnknownTicket, format!("unknown ticket {}", req.ticket_id));
        };
        let key_lock = self.key_lock(&key_id);
        let _serial = lock(&key_lock);
        let Some(reg) = self.registration(&key_id) else {
            return err(ErrorCode::UnknownKey, format!("unknown key {key_id}"));
        };
        if !reg.account_key().verify(&cancel_message(&req.ticket_id), &req.signature) {
            return err(ErrorCode::BadSignature, "cancel must be signed by the account key");
        }
        let Some(mut ticket) = lock(&self.tickets).get(&req.ticket_id).cloned() else {
            return err(ErrorCode::UnknownTicket, format!("unknown ticket {}", req.ticket_id));
        };
        if ticket.info.state != TicketState::Pending {
            return err(ErrorCode::TicketNotPending, format!("ticket is {:?}", ticket.info.state));
        }
        ticket.info.state = TicketState::Cancelled;
        if let Err(resp) = self.persist(TICKETS, &ticket) {
            return resp;
        }
        lock(&self.tickets).insert(req.ticket_id.clone(), ticket);
        Response::Cancelled { ticket_id: req.ticket_id }
    }

    pub fn handle_policy_update(&self, req: PolicyUpdateRequest) -> Response {
        let key_lock = self.key_lock(&req.key_id);
        let _serial = lock(&key_lock);
        let Some(reg) = self.registration(&req.key_id) else {
            return err(ErrorCode::UnknownKey, format!("unknown key {}", req.key_id));
        };
        let policy = match update_policy(&reg.policy, req.policy) {
            Ok(p) => p,
            Err(e) => return policy_error(e),
        };
        let record = RegistrationRecord::Policy { key_id: req.key_id.clone(), policy: policy.clone() };
        if let Err(resp) = self.persist(REGISTRATIONS, &record) {
            return resp;
        }
        let version = policy.policy.version;
        let next = Registration { request: reg.request.clone(), key: clone_key(&reg.key), policy };
        self.write_registrations().insert(req.key_id, Arc::new(next));
        Response::PolicyUpdated { version }
    }

    pub fn handle_ticket_status(&self, ticket_id: &str) -> Response {
        match self.ticket(ticket_id) {
            Some(info) => Response::Ticket(info),
            None => err(ErrorCode::UnknownTicket, format!("unknown ticket {ticket_id}")),
        }
    }
}

fn clone_key(k: &RegisteredKey) -> RegisteredKey {
    match k {
        RegisteredKey::Ecdsa { public_key } => RegisteredKey::Ecdsa { public_key: *public_key },
        RegisteredKey::Eddsa { public_key, server_share } => {
            RegisteredKey::Eddsa { public_key: *public_key, server_share: server_share.clone() }
        }
    }
}

fn policy_error(e: PolicyError) -> Response {
    let code = match e {
        PolicyError::BadSignature | PolicyError::AccountKeyChanged => ErrorCode::BadSignature,
        PolicyError::StaleVersion { .. } => ErrorCode::StaleVersion,
        PolicyError::Invalid(_) => ErrorCode::InvalidPolicy,
    };
    err(code, e.to_string())
}

fn response_reason(resp: &Response) -> String {
    match resp {
        Response::Error { code, message } => {
            format!("{}: {message}", serde_json::to_value(code).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        }
        other => format!("{other:?}"),
    }
}

impl Handler for ExchangeService {
    fn handle(&self, request: Request, peer: Option<IpAddr>) -> Response {
        match request {
            Request::Register(r) => self.handle_register(r),
            Request::Prepare(r) => self.handle_prepare(r),
            Request::Sign(r) => self.handle_sign(r, peer),
            Request::UpdatePolicy(r) => self.handle_policy_update(r),
            Request::Cancel(r) => self.handle_cancel(r),
            Request::TicketStatus { ticket_id } => self.handle_ticket_status(&ticket_id),
            Request::Paillier => {
                Response::Paillier { public_key: self.paillier.public_key().clone(), proof: self.proof.clone() }
            }
            Request::Health => Response::Health { status: "ok".into() },
        }
    }
}
