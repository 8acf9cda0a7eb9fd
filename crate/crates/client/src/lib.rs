//! The API-key holder's side.
//!
//! Mint an [`ApiKeyFile`] on a trusted device with [`mint_api_key`], move the
//! file to wherever trading happens, and sign through a [`Session`]: the
//! session keeps a pool of prepared nonce points and sends one message per
//! signature.

pub mod keyfile;
pub mod mint;
pub mod session;
pub mod transport;

pub use keyfile::{ApiKeyFile, SealedKeyFile};
pub use mint::{mint_api_key, FullKey, FullKeyFile};
pub use session::{fetch_exchange_key, Session, SignOptions, SignOutcome};
pub use transport::{HttpTransport, InProcess, Recorder, TcpTransport, Transport};

use apikey_core::paillier::PaillierError;
use apikey_core::policy::DenyCode;
use apikey_core::pool::PoolError;
use apikey_core::wire::ErrorCode;
use apikey_core::ProtocolError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("transport: {0}")]
    Transport(String),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error("exchange Paillier key rejected: {0}")]
    ProofRejected(PaillierError),
    #[error("key file was minted for a different exchange key")]
    FingerprintMismatch,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("denied by policy ({code:?}): {message}")]
    Denied { code: DenyCode, message: String },
    #[error("exchange error ({code:?}): {message}")]
    Exchange { code: ErrorCode, message: String },
    #[error("returned signature does not verify")]
    InvalidSignature,
    #[error("unexpected response: {0}")]
    Unexpected(String),
}

impl ClientError {
    /// Process exit code for scripted use.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Denied { .. } => 3,
            ClientError::Exchange { .. } | ClientError::Unexpected(_) => 4,
            ClientError::Transport(_) | ClientError::Io(_) => 5,
            ClientError::ProofRejected(_) | ClientError::FingerprintMismatch | ClientError::InvalidSignature => 6,
            _ => 1,
        }
    }
}
