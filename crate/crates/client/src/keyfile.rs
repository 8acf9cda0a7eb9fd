//! The API-key file: one JSON document holding the client share and the
//! encrypted exchange share, optionally sealed under a passphrase.

use std::path::Path;

use apikey_core::account::AccountPublicKey;
use apikey_core::curve::{CurveId, CurvePoint};
use apikey_core::ecdsa::ApiKeyEcdsa;
use apikey_core::eddsa::{ApiKeyEddsa, EdPoint};
use apikey_core::paillier::PaillierPublicKey;
use apikey_core::{KeyId, Scheme};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use crate::ClientError;

pub const FORMAT_VERSION: u32 = 1;
pub const PBKDF2_ROUNDS: u32 = 210_000;
const SEAL_AAD: &[u8] = b"apikey-file-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiKeyFile {
    pub version: u32,
    pub scheme: Scheme,
    pub key_id: KeyId,
    /// ECDSA curve; always present, ignored for EdDSA.
    pub curve: CurveId,
    /// ECDSA: 32-byte big-endian `x1'`. EdDSA: 32-byte little-endian scalar.
    pub client_share: String,
    pub enc_server_share: String,
    /// Hex: compressed point (ECDSA) or Ed25519 key (EdDSA).
    pub public_key: String,
    pub account_public_key: AccountPublicKey,
    /// SHA-256 of the exchange Paillier modulus the key was minted against.
    pub paillier_fingerprint: String,
    pub created_at_ms: u64,
}

/// Passphrase-sealed form of an [`ApiKeyFile`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SealedKeyFile {
    pub version: u32,
    pub kdf: String,
    pub rounds: u32,
    pub salt: String,
    pub nonce: String,
    pub ciphertext: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Stored {
    Sealed(SealedKeyFile),
    Plain(ApiKeyFile),
}

fn derive_key(passphrase: &str, salt: &[u8], rounds: u32) -> Zeroizing<[u8; 32]> {
    let mut key = Zeroizing::new([0u8; 32]);
    pbkdf2::pbkdf2_hmac::<Sha256>(passphrase.as_bytes(), salt, rounds, key.as_mut());
    key
}

impl ApiKeyFile {
    fn check_fingerprint(&self, pk: &PaillierPublicKey) -> Result<(), ClientError> {
        if pk.fingerprint().to_hex() != self.paillier_fingerprint {
            return Err(ClientError::FingerprintMismatch);
        }
        Ok(())
    }

    /// Rebuilds the ECDSA key against the exchange's live Paillier key,
    /// which must be the one the file was minted for.
    pub fn to_ecdsa(&self, paillier: &PaillierPublicKey) -> Result<ApiKeyEcdsa, ClientError> {
        if self.scheme != Scheme::Ecdsa {
            return Err(ClientError::KeyFile("not an ECDSA key".into()));
        }
        self.check_fingerprint(paillier)?;
        let share = Zeroizing::new(hex::decode(&self.client_share).map_err(|e| ClientError::KeyFile(e.to_string()))?);
        let enc = paillier.ciphertext_from_hex(&self.enc_server_share).map_err(|e| ClientError::KeyFile(e.to_string()))?;
        let public_key =
            CurvePoint::from_hex(self.curve, &self.public_key).map_err(|e| ClientError::KeyFile(e.to_string()))?;
        ApiKeyEcdsa::from_parts(
            self.key_id.clone(),
            self.curve,
            BigUint::from_bytes_be(&share),
            enc,
            public_key,
            paillier.clone(),
        )
        .map_err(|e| ClientError::KeyFile(e.to_string()))
    }

    pub fn to_eddsa(&self, paillier: &PaillierPublicKey) -> Result<ApiKeyEddsa, ClientError> {
        if self.scheme != Scheme::Eddsa {
            return Err(ClientError::KeyFile("not an EdDSA key".into()));
        }
        self.check_fingerprint(paillier)?;
        let share: Zeroizing<[u8; 32]> = Zeroizing::new(
            hex::decode(&self.client_share)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| ClientError::KeyFile("client_share must be 32 bytes of hex".into()))?,
        );
        let enc = paillier.ciphertext_from_hex(&self.enc_server_share).map_err(|e| ClientError::KeyFile(e.to_string()))?;
        let public_key = EdPoint::from_hex(&self.public_key).map_err(|e| ClientError::KeyFile(e.to_string()))?;
        ApiKeyEddsa::from_parts(self.key_id.clone(), *share, enc, public_key)
            .map_err(|e| ClientError::KeyFile(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("key file serializes")
    }

    pub fn seal<R: RngCore + CryptoRng>(&self, passphrase: &str, rng: &mut R) -> SealedKeyFile {
        self.seal_with_rounds(passphrase, PBKDF2_ROUNDS, rng)
    }

    pub fn seal_with_rounds<R: RngCore + CryptoRng>(&self, passphrase: &str, rounds: u32, rng: &mut R) -> SealedKeyFile {
        let mut salt = [0u8; 16];
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut nonce);
        let key = derive_key(passphrase, &salt, rounds);
        let plain = Zeroizing::new(serde_json::to_vec(self).expect("key file serializes"));
        let ciphertext = ChaCha20Poly1305::new(Key::from_slice(key.as_ref()))
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: &plain, aad: SEAL_AAD })
            .expect("encryption cannot fail for in-memory buffers");
        SealedKeyFile {
            version: FORMAT_VERSION,
            kdf: "pbkdf2-hmac-sha256".into(),
            rounds,
            salt: hex::encode(salt),
            nonce: hex::encode(nonce),
            ciphertext: hex::encode(ciphertext),
        }
    }

    /// Writes the file, sealed when a passphrase is given.
    pub fn save(&self, path: impl AsRef<Path>, passphrase: Option<&str>) -> Result<(), ClientError> {
        let text = match passphrase {
            Some(p) => serde_json::to_string_pretty(&self.seal(p, &mut rand::rngs::OsRng)).expect("serializes"),
            None => self.to_json(),
        };
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, passphrase: Option<&str>) -> Result<Self, ClientError> {
        Self::parse(&std::fs::read_to_string(path)?, passphrase)
    }

    pub fn parse(text: &str, passphrase: Option<&str>) -> Result<Self, ClientError> {
        let stored: Stored = serde_json::from_str(text).map_err(|e| ClientError::KeyFile(e.to_string()))?;
        let file = match (stored, passphrase) {
            (Stored::Plain(f), _) => f,
            (Stored::Sealed(s), Some(p)) => s.open(p)?,
            (Stored::Sealed(_), None) => return Err(ClientError::KeyFile("key file is sealed; passphrase required".into())),
        };
        if file.version != FORMAT_VERSION {
            return Err(ClientError::KeyFile(format!("unsupported key file version {}", file.version)));
        }
        Ok(file)
    }
}

impl SealedKeyFile {
    pub fn open(&self, passphrase: &str) -> Result<ApiKeyFile, ClientError> {
        let bad = |what: &str| ClientError::KeyFile(format!("sealed key file: {what}"));
        if self.kdf != "pbkdf2-hmac-sha256" {
            return Err(bad("unknown kdf"));
        }
        let salt = hex::decode(&self.salt).map_err(|_| bad("salt"))?;
        let nonce: [u8; 12] = hex::decode(&self.nonce).ok().and_then(|n| n.try_into().ok()).ok_or_else(|| bad("nonce"))?;
        let ct = hex::decode(&self.ciphertext).map_err(|_| bad("ciphertext"))?;
        let key = derive_key(passphrase, &salt, self.rounds);
        let plain = Zeroizing::new(
            ChaCha20Poly1305::new(Key::from_slice(key.as_ref()))
                .decrypt(Nonce::from_slice(&nonce), Payload { msg: &ct, aad: SEAL_AAD })
                .map_err(|_| bad("wrong passphrase or corrupted file"))?,
        );
        serde_json::from_slice(&plain).map_err(|e| ClientError::KeyFile(e.to_string()))
    }
}
