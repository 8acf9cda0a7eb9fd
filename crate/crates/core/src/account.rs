//! Full account keys. These authorise policies and cancellations; an API
//! key can never produce one of these signatures.

use std::fmt;

use ed25519_dalek::{Signer as _, Verifier as _};
use k256::ecdsa::signature::hazmat::{PrehashSigner, PrehashVerifier};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::EncodingError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccountScheme {
    Secp256k1,
    Ed25519,
}

impl std::str::FromStr for AccountScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "secp256k1" => Ok(Self::Secp256k1),
            "ed25519" => Ok(Self::Ed25519),
            other => Err(format!("unknown account scheme {other:?}")),
        }
    }
}

/// Public half of an account key: 33-byte compressed secp256k1 or 32-byte
/// Ed25519, hex in JSON.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "WireKey", into = "WireKey")]
pub struct AccountPublicKey {
    scheme: AccountScheme,
    bytes: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct WireKey {
    scheme: AccountScheme,
    key: String,
}

impl TryFrom<WireKey> for AccountPublicKey {
    type Error = EncodingError;

    fn try_from(w: WireKey) -> Result<Self, Self::Error> {
        let bytes = hex::decode(&w.key).map_err(|e| EncodingError::Hex(e.to_string()))?;
        Self::from_bytes(w.scheme, &bytes)
    }
}

impl From<AccountPublicKey> for WireKey {
    fn from(k: AccountPublicKey) -> Self {
        WireKey { scheme: k.scheme, key: hex::encode(&k.bytes) }
    }
}

impl fmt::Debug for AccountPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountPublicKey({:?}, {})", self.scheme, hex::encode(&self.bytes))
    }
}

impl AccountPublicKey {
    pub fn from_bytes(scheme: AccountScheme, bytes: &[u8]) -> Result<Self, EncodingError> {
        match scheme {
            AccountScheme::Secp256k1 => {
                if bytes.len() != 33 {
                    return Err(EncodingError::Length { expected: 33, actual: bytes.len() });
                }
                k256::ecdsa::VerifyingKey::from_sec1_bytes(bytes)
                    .map_err(|_| EncodingError::NonCanonical("not a secp256k1 point"))?;
            }
            AccountScheme::Ed25519 => {
                let arr: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| EncodingError::Length { expected: 32, actual: bytes.len() })?;
                ed25519_dalek::VerifyingKey::from_bytes(&arr)
                    .map_err(|_| EncodingError::NonCanonical("not an Ed25519 key"))?;
            }
        }
        Ok(Self { scheme, bytes: bytes.to_vec() })
    }

    pub fn scheme(&self) -> AccountScheme {
        self.scheme
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }

    /// Checks `sig` over a 32-byte digest. secp256k1 signatures must be low-s.
    pub fn verify_digest(&self, digest: &[u8; 32], sig: &AccountSignature) -> bool {
        match self.scheme {
            AccountScheme::Secp256k1 => {
                let Ok(vk) = k256::ecdsa::VerifyingKey::from_sec1_bytes(&self.bytes) else {
                    return false;
                };
                let Ok(sig) = k256::ecdsa::Signature::from_slice(&sig.0) else {
                    return false;
                };
                sig.normalize_s().is_none() && vk.verify_prehash(digest, &sig).is_ok()
            }
            AccountScheme::Ed25519 => {
                let Ok(arr) = <[u8; 32]>::try_from(self.bytes.as_slice()) else {
                    return false;
                };
                let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&arr) else {
                    return false;
                };
                let Ok(sig) = ed25519_dalek::Signature::from_slice(&sig.0) else {
                    return false;
                };
                vk.verify(digest, &sig).is_ok()
            }
        }
    }

    pub fn verify(&self, message: &[u8], sig: &AccountSignature) -> bool {
        self.verify_digest(&Sha256::digest(message).into(), sig)
    }
}

/// 64-byte signature, hex in JSON.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AccountSignature(Vec<u8>);

impl AccountSignature {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() != 64 {
            return Err(EncodingError::Length { expected: 64, actual: bytes.len() });
        }
        Ok(Self(bytes.to_vec()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl TryFrom<String> for AccountSignature {
    type Error = EncodingError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::from_bytes(&hex::decode(s).map_err(|e| EncodingError::Hex(e.to_string()))?)
    }
}

impl From<AccountSignature> for String {
    fn from(s: AccountSignature) -> Self {
        hex::encode(s.0)
    }
}

impl fmt::Debug for AccountSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountSignature({})", hex::encode(&self.0))
    }
}

/// Secret account key, held only on the user's trusted device.
#[derive(Clone)]
pub enum AccountSigningKey {
    Secp256k1(k256::ecdsa::SigningKey),
    Ed25519(ed25519_dalek::SigningKey),
}

impl fmt::Debug for AccountSigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountSigningKey({:?})", self.public_key())
    }
}

impl AccountSigningKey {
    pub fn generate<R: RngCore + CryptoRng>(scheme: AccountScheme, rng: &mut R) -> Self {
        match scheme {
            AccountScheme::Secp256k1 => Self::Secp256k1(k256::ecdsa::SigningKey::random(rng)),
            AccountScheme::Ed25519 => Self::Ed25519(ed25519_dalek::SigningKey::generate(rng)),
        }
    }

    /// 32 secret bytes: a big-endian secp256k1 scalar or an Ed25519 seed.
    pub fn from_bytes(scheme: AccountScheme, bytes: &[u8; 32]) -> Result<Self, EncodingError> {
        match scheme {
            AccountScheme::Secp256k1 => k256::ecdsa::SigningKey::from_bytes(bytes.into())
                .map(Self::Secp256k1)
                .map_err(|_| EncodingError::NonCanonical("secp256k1 scalar out of range")),
            AccountScheme::Ed25519 => Ok(Self::Ed25519(ed25519_dalek::SigningKey::from_bytes(bytes))),
        }
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        match self {
            Self::Secp256k1(k) => k.to_bytes().into(),
            Self::Ed25519(k) => k.to_bytes(),
        }
    }

    pub fn scheme(&self) -> AccountScheme {
        match self {
            Self::Secp256k1(_) => AccountScheme::Secp256k1,
            Self::Ed25519(_) => AccountScheme::Ed25519,
        }
    }

    pub fn public_key(&self) -> AccountPublicKey {
        let bytes = match self {
            Self::Secp256k1(k) => k.verifying_key().to_encoded_point(true).as_bytes().to_vec(),
            Self::Ed25519(k) => k.verifying_key().as_bytes().to_vec(),
        };
        AccountPublicKey { scheme: self.scheme(), bytes }
    }

    pub fn sign_digest(&self, digest: &[u8; 32]) -> AccountSignature {
        match self {
            Self::Secp256k1(k) => {
                let sig: k256::ecdsa::Signature = k.sign_prehash(digest).expect("32-byte prehash");
                let sig = sig.normalize_s().unwrap_or(sig);
                AccountSignature(sig.to_bytes().to_vec())
            }
            Self::Ed25519(k) => AccountSignature(k.sign(digest).to_bytes().to_vec()),
        }
    }

    pub fn sign(&self, message: &[u8]) -> AccountSignature {
        self.sign_digest(&Sha256::digest(message).into())
    }
}
