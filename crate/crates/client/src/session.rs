use std::collections::BTreeMap;

use apikey_core::account::AccountSigningKey;
use apikey_core::curve::CurvePoint;
use apikey_core::ecdsa::{compute_presignature, verify_ecdsa, ApiKeyEcdsa, EcdsaClientEntry, Signature};
use apikey_core::eddsa::{ed_client_sign, verify_ed25519, ApiKeyEddsa, EdClientEntry, EdPoint, EdSignature};
use apikey_core::message::{digest_scalar, message_digest};
use apikey_core::paillier::{KeyCorrectnessProof, PaillierPublicKey};
use apikey_core::policy::{Action, SignedPolicy};
use apikey_core::pool::{refill_ecdsa, refill_eddsa, ClientPool, PoolConfig, PoolError, RefillOutcome};
use apikey_core::wire::{
    cancel_message, CancelRequest, ErrorCode, PolicyUpdateRequest, PrepareRequest, RegisterRequest, Request,
    Response, SignRequest, TicketInfo,
};
use apikey_core::{ProtocolError, Scheme};
use rand::rngs::OsRng;

use crate::keyfile::ApiKeyFile;
use crate::transport::Transport;
use crate::ClientError;

/// What the client asserts about a signing request. The source address is
/// never part of this; the exchange takes it from the connection.
#[derive(Clone, Debug, Default)]
pub struct SignOptions {
    pub action: Option<Action>,
    pub device_id: Option<String>,
    pub attributes: BTreeMap<String, String>,
}

impl SignOptions {
    pub fn action(action: Action) -> Self {
        Self { action: Some(action), ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SignOutcome {
    /// A signature that verified locally under the API key's public key.
    Signed { signature: Vec<u8>, signature_id: String },
    Deferred { ticket_id: String, release_at_ms: u64 },
}

impl SignOutcome {
    pub fn signature(&self) -> Option<&[u8]> {
        match self {
            SignOutcome::Signed { signature, .. } => Some(signature),
            SignOutcome::Deferred { .. } => None,
        }
    }
}

enum SessionKey {
    Ecdsa { key: ApiKeyEcdsa, pool: ClientPool<EcdsaClientEntry> },
    Eddsa { key: ApiKeyEddsa, pool: ClientPool<EdClientEntry> },
}

/// Fetches the exchange's Paillier key and correctness proof.
pub fn fetch_exchange_key<T: Transport + ?Sized>(
    transport: &T,
) -> Result<(PaillierPublicKey, KeyCorrectnessProof), ClientError> {
    match transport.call(&Request::Paillier)? {
        Response::Paillier { public_key, proof } => Ok((public_key, proof)),
        other => Err(unexpected(other)),
    }
}

fn unexpected(resp: Response) -> ClientError {
    match resp {
        Response::Error { code, message } => ClientError::Exchange { code, message },
        Response::Denied { code, message } => ClientError::Denied { code, message },
        other => ClientError::Unexpected(format!("{other:?}")),
    }
}

/// A working session for one API key.
pub struct Session<T: Transport> {
    transport: T,
    file: ApiKeyFile,
    key: SessionKey,
    auto_refill: bool,
}

impl<T: Transport> Session<T> {
    /// Loads the key against the exchange's live Paillier key; the key
    /// file's fingerprint has to match it.
    pub fn open(transport: T, file: ApiKeyFile, config: PoolConfig) -> Result<Self, ClientError> {
        let (paillier, _) = fetch_exchange_key(&transport)?;
        let key = match file.scheme {
            Scheme::Ecdsa => SessionKey::Ecdsa { key: file.to_ecdsa(&paillier)?, pool: ClientPool::new(config) },
            Scheme::Eddsa => SessionKey::Eddsa { key: file.to_eddsa(&paillier)?, pool: ClientPool::new(config) },
        };
        Ok(Self { transport, file, key, auto_refill: true })
    }

    /// When off, [`Session::sign`] never tops up the pool by itself.
    pub fn set_auto_refill(&mut self, on: bool) {
        self.auto_refill = on;
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn key_file(&self) -> &ApiKeyFile {
        &self.file
    }

    pub fn pool_len(&self) -> usize {
        match &self.key {
            SessionKey::Ecdsa { pool, .. } => pool.len(),
            SessionKey::Eddsa { pool, .. } => pool.len(),
        }
    }

    fn pool_config(&self) -> PoolConfig {
        match &self.key {
            SessionKey::Ecdsa { pool, .. } => pool.config(),
            SessionKey::Eddsa { pool, .. } => pool.config(),
        }
    }

    pub fn register(&self, policy: SignedPolicy) -> Result<(), ClientError> {
        let f = &self.file;
        let request = RegisterRequest {
            key_id: f.key_id.clone(),
            scheme: f.scheme,
            curve: f.curve,
            public_key: f.public_key.clone(),
            policy,
            enc_server_share: (f.scheme == Scheme::Eddsa).then(|| f.enc_server_share.clone()),
        };
        match self.transport.call(&Request::Register(request))? {
            Response::Registered { .. } => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    fn prepare(&self, points: Vec<String>) -> Result<Vec<Option<String>>, ClientError> {
        let request = PrepareRequest { key_id: self.file.key_id.clone(), points };
        match self.transport.call(&Request::Prepare(request))? {
            Response::Prepared { points } => Ok(points.into_iter().map(|p| p.point).collect()),
            other => Err(unexpected(other)),
        }
    }

    /// Runs one preparation round of `count` points.
    pub fn refill(&self, count: usize) -> Result<RefillOutcome, ClientError> {
        let outcome = match &self.key {
            SessionKey::Ecdsa { key, pool } => refill_ecdsa(pool, key, count, &mut OsRng, |points| {
                let curve = key.curve();
                self.prepare(points.iter().map(CurvePoint::to_hex).collect()).map(|replies| {
                    replies.into_iter().map(|p| p.and_then(|h| CurvePoint::from_hex(curve, &h).ok())).collect()
                })
            }),
            SessionKey::Eddsa { pool, .. } => refill_eddsa(pool, count, &mut OsRng, |points| {
                self.prepare(points.iter().map(EdPoint::to_hex).collect())
                    .map(|replies| replies.into_iter().map(|p| p.and_then(|h| EdPoint::from_hex(&h).ok())).collect())
            }),
        }?;
        Ok(outcome)
    }

    /// Tops the pool up to the batch size if it holds fewer than `min`
    /// entries. Returns how many entries were added.
    pub fn ensure_pool(&self, min: usize) -> Result<usize, ClientError> {
        let len = self.pool_len();
        if len >= min.max(1) {
            return Ok(0);
        }
        let target = self.pool_config().batch_size.max(min);
        Ok(self.refill(target - len)?.added)
    }

    fn build_request(&self, message: &[u8], opts: &SignOptions) -> Result<(SignRequest, bool), ClientError> {
        let (payload, refill_needed) = match &self.key {
            SessionKey::Ecdsa { key, pool } => {
                let m = digest_scalar(key.curve(), &message_digest(message));
                loop {
                    let taken = match pool.take() {
                        Ok(t) => t,
                        Err(PoolError::Exhausted) => {
                            self.ensure_pool(1)?;
                            pool.take()?
                        }
                        Err(e) => return Err(e.into()),
                    };
                    match compute_presignature(key, taken.entry, &m, &mut OsRng) {
                        Ok(p) => break (p.to_bytes(key.paillier_pk()), taken.refill_needed),
                        Err(ProtocolError::DegenerateNonce) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            SessionKey::Eddsa { key, pool } => {
                let taken = match pool.take() {
                    Ok(t) => t,
                    Err(PoolError::Exhausted) => {
                        self.ensure_pool(1)?;
                        pool.take()?
                    }
                    Err(e) => return Err(e.into()),
                };
                (ed_client_sign(key, taken.entry, message).to_bytes().to_vec(), taken.refill_needed)
            }
        };
        let request = SignRequest {
            key_id: self.file.key_id.clone(),
            message: hex::encode(message),
            action: opts.action.clone().unwrap_or(Action::Raw),
            device_id: opts.device_id.clone(),
            attributes: opts.attributes.clone(),
            payload: hex::encode(payload),
        };
        Ok((request, refill_needed))
    }

    /// Checks a returned signature under the API key's public key.
    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        match &self.key {
            SessionKey::Ecdsa { key, .. } => {
                let m = digest_scalar(key.curve(), &message_digest(message));
                Signature::from_bytes(signature)
                    .is_ok_and(|s| s.is_low_s(key.curve()) && verify_ecdsa(key.public_key(), &m, &s))
            }
            SessionKey::Eddsa { key, .. } => <[u8; 64]>::try_from(signature)
                .is_ok_and(|s| verify_ed25519(key.public_key(), message, &EdSignature(s))),
        }
    }

    /// Signs `message` with a single request to the exchange. A point the
    /// exchange no longer knows is retried once with a fresh one; transport
    /// failures are returned as-is, since the exchange may have signed.
    pub fn sign(&self, message: &[u8], opts: &SignOptions) -> Result<SignOutcome, ClientError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let (request, refill_needed) = self.build_request(message, opts)?;
            let response = self.transport.call(&Request::Sign(request))?;
            if refill_needed && self.auto_refill {
                if let Err(e) = self.ensure_pool(self.pool_config().low_water + 1) {
                    log::warn!("pool refill failed: {e}");
                }
            }
            match response {
                Response::Signed { signature, signature_id } => {
                    let signature = hex::decode(&signature).map_err(|e| ClientError::Unexpected(e.to_string()))?;
                    if !self.verify(message, &signature) {
                        return Err(ClientError::InvalidSignature);
                    }
                    return Ok(SignOutcome::Signed { signature, signature_id });
                }
                Response::Deferred { ticket_id, release_at_ms } => {
                    return Ok(SignOutcome::Deferred { ticket_id, release_at_ms })
                }
                Response::Error { code: ErrorCode::ReplayedPoint, message: m } if attempts < 2 => {
                    log::info!("retrying with a fresh point: {m}");
                }
                other => return Err(unexpected(other)),
            }
        }
    }

    pub fn ticket(&self, ticket_id: &str) -> Result<TicketInfo, ClientError> {
        match self.transport.call(&Request::TicketStatus { ticket_id: ticket_id.to_owned() })? {
            Response::Ticket(info) => Ok(info),
            other => Err(unexpected(other)),
        }
    }

    /// Cancels a deferred request. Needs the full account key, not the API key.
    pub fn cancel(&self, ticket_id: &str, account: &AccountSigningKey) -> Result<(), ClientError> {
        let signature = account.sign(&cancel_message(ticket_id));
        match self.transport.call(&Request::Cancel(CancelRequest { ticket_id: ticket_id.to_owned(), signature }))? {
            Response::Cancelled { .. } => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    pub fn update_policy(&self, policy: SignedPolicy) -> Result<u64, ClientError> {
        let req = PolicyUpdateRequest { key_id: self.file.key_id.clone(), policy };
        match self.transport.call(&Request::UpdatePolicy(req))? {
            Response::PolicyUpdated { version } => Ok(version),
            other => Err(unexpected(other)),
        }
    }
}
