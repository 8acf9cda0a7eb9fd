//! Two-party threshold signing for non-custodial exchange API keys.
//!
//! The owner of a full secret key mints an API key offline: a client share
//! plus the exchange's share encrypted under the exchange's Paillier key.
//! Signing needs both the API-key holder and the exchange, and the exchange
//! only participates when the request satisfies a policy signed by the
//! account owner.
//!
//! Signing runs in two phases. A message-independent preparation phase
//! fills a pool of jointly generated nonce points; the finalization phase
//! is a single client-to-exchange message carrying a presignature that the
//! exchange completes, verifies and releases.
//!
//! * [`paillier`]: the homomorphic encryption layer and the key-correctness proof.
//! * [`ecdsa`]: multiplicative 2-of-2 ECDSA over secp256k1 (or P-256).
//! * [`eddsa`]: additive 2-of-2 Ed25519.
//! * [`pool`]: single-use nonce-point pools with durable consumption.
//! * [`policy`]: user-authored signing policies and usage accounting.

pub mod account;
pub mod curve;
mod error;
pub mod ecdsa;
pub mod eddsa;
pub mod encoding;
pub mod message;
pub mod paillier;
pub mod policy;
pub mod pool;
pub mod wire;

mod keyid;

pub use error::ProtocolError;
pub use keyid::KeyId;

/// Signature scheme an API key signs with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Ecdsa,
    Eddsa,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::Ecdsa => f.write_str("ecdsa"),
            Scheme::Eddsa => f.write_str("eddsa"),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ecdsa" => Ok(Scheme::Ecdsa),
            "eddsa" => Ok(Scheme::Eddsa),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}
