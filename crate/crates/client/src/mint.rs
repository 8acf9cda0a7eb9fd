//! Minting on the trusted device that holds the full key.

use apikey_core::account::AccountPublicKey;
use apikey_core::curve::CurveId;
use apikey_core::ecdsa::generate_api_key;
use apikey_core::eddsa::{generate_api_key_ed, public_key_of};
use apikey_core::paillier::{KeyCorrectnessProof, PaillierPublicKey, VerifiedPaillierKey};
use apikey_core::Scheme;
use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::keyfile::{ApiKeyFile, FORMAT_VERSION};
use crate::ClientError;

/// A complete signing key. Its bytes are wiped when it is dropped.
pub enum FullKey {
    /// 32-byte big-endian scalar `x`.
    Ecdsa { curve: CurveId, secret: Zeroizing<[u8; 32]> },
    /// 32-byte Ed25519 seed.
    Eddsa { secret: Zeroizing<[u8; 32]> },
}

impl std::fmt::Debug for FullKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FullKey").field("scheme", &self.scheme()).finish_non_exhaustive()
    }
}

/// On-disk form of a [`FullKey`] for the trusted device.
#[derive(Serialize, Deserialize)]
pub struct FullKeyFile {
    pub scheme: Scheme,
    #[serde(default)]
    pub curve: CurveId,
    pub secret: String,
}

impl FullKey {
    pub fn generate<R: RngCore + CryptoRng>(scheme: Scheme, curve: CurveId, rng: &mut R) -> Self {
        match scheme {
            Scheme::Ecdsa => {
                let x = curve.random_scalar(rng);
                let mut secret = Zeroizing::new([0u8; 32]);
                secret.copy_from_slice(&apikey_core::encoding::scalar_to_bytes32(&x));
                FullKey::Ecdsa { curve, secret }
            }
            Scheme::Eddsa => {
                let mut secret = Zeroizing::new([0u8; 32]);
                rng.fill_bytes(secret.as_mut());
                FullKey::Eddsa { secret }
            }
        }
    }

    pub fn from_file(file: &FullKeyFile) -> Result<Self, ClientError> {
        let bytes = Zeroizing::new(hex::decode(&file.secret).map_err(|e| ClientError::KeyFile(e.to_string()))?);
        let mut secret = Zeroizing::new([0u8; 32]);
        if bytes.len() != 32 {
            return Err(ClientError::KeyFile("secret must be 32 bytes".into()));
        }
        secret.copy_from_slice(&bytes);
        Ok(match file.scheme {
            Scheme::Ecdsa => {
                let x = BigUint::from_bytes_be(secret.as_ref());
                if x == BigUint::default() || x >= *file.curve.order() {
                    return Err(ClientError::KeyFile("secret is not a valid scalar".into()));
                }
                FullKey::Ecdsa { curve: file.curve, secret }
            }
            Scheme::Eddsa => FullKey::Eddsa { secret },
        })
    }

    pub fn to_file(&self) -> FullKeyFile {
        match self {
            FullKey::Ecdsa { curve, secret } => {
                FullKeyFile { scheme: Scheme::Ecdsa, curve: *curve, secret: hex::encode(secret.as_ref()) }
            }
            FullKey::Eddsa { secret } => {
                FullKeyFile { scheme: Scheme::Eddsa, curve: CurveId::default(), secret: hex::encode(secret.as_ref()) }
            }
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            FullKey::Ecdsa { .. } => Scheme::Ecdsa,
            FullKey::Eddsa { .. } => Scheme::Eddsa,
        }
    }

    /// Hex of the public key the API key will sign for.
    pub fn public_key_hex(&self) -> Result<String, ClientError> {
        match self {
            FullKey::Ecdsa { curve, secret } => Ok(curve
                .mul_base(&BigUint::from_bytes_be(secret.as_ref()))
                .map_err(|e| ClientError::KeyFile(e.to_string()))?
                .to_hex()),
            FullKey::Eddsa { secret } => Ok(hex::encode(public_key_of(secret))),
        }
    }
}

/// Mints an API key for `full`. The exchange's Paillier key is checked
/// against its correctness proof first; a bad proof aborts minting.
/// `full` is consumed and wiped.
pub fn mint_api_key<R: RngCore + CryptoRng>(
    full: FullKey,
    paillier: &PaillierPublicKey,
    proof: &KeyCorrectnessProof,
    account_public_key: &AccountPublicKey,
    created_at_ms: u64,
    rng: &mut R,
) -> Result<ApiKeyFile, ClientError> {
    let verified = VerifiedPaillierKey::verify(paillier.clone(), proof).map_err(ClientError::ProofRejected)?;
    let file = match &full {
        FullKey::Ecdsa { curve, secret } => {
            let key = generate_api_key(&BigUint::from_bytes_be(secret.as_ref()), *curve, &verified, rng)?;
            ApiKeyFile {
                version: FORMAT_VERSION,
                scheme: Scheme::Ecdsa,
                key_id: key.key_id().clone(),
                curve: *curve,
                client_share: hex::encode(apikey_core::encoding::scalar_to_bytes32(key.client_share())),
                enc_server_share: key.enc_server_share().to_hex(),
                public_key: key.public_key().to_hex(),
                account_public_key: account_public_key.clone(),
                paillier_fingerprint: paillier.fingerprint().to_hex(),
                created_at_ms,
            }
        }
        FullKey::Eddsa { secret } => {
            let key = generate_api_key_ed(secret, &verified, rng)?;
            ApiKeyFile {
                version: FORMAT_VERSION,
                scheme: Scheme::Eddsa,
                key_id: key.key_id().clone(),
                curve: CurveId::default(),
                client_share: hex::encode(key.client_share_bytes()),
                enc_server_share: key.enc_server_share().to_hex(),
                public_key: key.public_key().to_hex(),
                account_public_key: account_public_key.clone(),
                paillier_fingerprint: paillier.fingerprint().to_hex(),
                created_at_ms,
            }
        }
    };
    drop(full);
    Ok(file)
}
