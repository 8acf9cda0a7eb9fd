//! Additive 2-of-2 threshold Ed25519.
//!
//! The signing scalar `a` is split as `a = client + server mod L`. Nonce
//! points are summed, `R = r_c·B + r_s·B`, so both parties hold `R` but
//! neither knows the joint nonce. The client answers with
//! `s_client = r_c + h·client`, the exchange adds `r_s + h·server`, and the
//! result is an ordinary Ed25519 signature.
//!
//! Nonces are random rather than derived from the message, so the hash
//! prefix half of the expanded secret key plays no role here.

use std::fmt;

use curve25519_dalek::constants::ED25519_BASEPOINT_POINT;
use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::scalar::Scalar;
use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};

use crate::encoding::{hex_to_array, EncodingError};
use crate::paillier::{Ciphertext, PaillierPublicKey, PaillierSecretKey, VerifiedPaillierKey};
use crate::{KeyId, ProtocolError};

pub const POINT_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

/// Order of the Ed25519 base point, `2^252 + 27742317777372353535851937790883648493`.
pub fn group_order() -> BigUint {
    (BigUint::from(1u8) << 252u32)
        + BigUint::parse_bytes(b"27742317777372353535851937790883648493", 10).expect("constant")
}

/// A decoded Edwards point that is not of small order (which also rules
/// out the identity). Encodings must be canonical.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdPoint {
    compressed: [u8; POINT_LEN],
}

impl fmt::Debug for EdPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EdPoint({})", hex::encode(self.compressed))
    }
}

impl EdPoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let arr: [u8; POINT_LEN] = bytes
            .try_into()
            .map_err(|_| EncodingError::Length { expected: POINT_LEN, actual: bytes.len() })?;
        let point = CompressedEdwardsY(arr)
            .decompress()
            .ok_or(EncodingError::NonCanonical("not an Edwards point"))?;
        if point.compress().0 != arr {
            return Err(EncodingError::NonCanonical("non-canonical point encoding").into());
        }
        Self::from_point(&point)
    }

    pub fn from_hex(s: &str) -> Result<Self, ProtocolError> {
        Self::from_bytes(&hex_to_array::<POINT_LEN>(s)?)
    }

    fn from_point(point: &EdwardsPoint) -> Result<Self, ProtocolError> {
        if point.is_small_order() {
            return Err(ProtocolError::LowOrderPoint);
        }
        Ok(Self { compressed: point.compress().0 })
    }

    fn point(&self) -> EdwardsPoint {
        CompressedEdwardsY(self.compressed).decompress().expect("validated on construction")
    }

    pub fn as_bytes(&self) -> &[u8; POINT_LEN] {
        &self.compressed
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.compressed)
    }
}

/// Derives the Ed25519 signing scalar from a 32-byte secret key: the clamped
/// lower half of `SHA-512(secret)`, reduced mod `L`.
pub fn signing_scalar(secret: &[u8; 32]) -> Scalar {
    let h = Sha512::digest(secret);
    let mut lower = [0u8; 32];
    lower.copy_from_slice(&h[..32]);
    lower[0] &= 248;
    lower[31] &= 127;
    lower[31] |= 64;
    Scalar::from_bytes_mod_order(lower)
}

pub fn public_key_of(secret: &[u8; 32]) -> [u8; POINT_LEN] {
    (ED25519_BASEPOINT_POINT * signing_scalar(secret)).compress().0
}

fn random_nonzero_scalar<R: RngCore + CryptoRng>(rng: &mut R) -> Scalar {
    loop {
        let s = Scalar::random(rng);
        if s != Scalar::ZERO {
            return s;
        }
    }
}

fn scalar_to_biguint(s: &Scalar) -> BigUint {
    BigUint::from_bytes_le(s.as_bytes())
}

/// Client-side view of a threshold Ed25519 API key.
#[derive(Clone)]
pub struct ApiKeyEddsa {
    key_id: KeyId,
    client_share: Scalar,
    enc_server_share: Ciphertext,
    public_key: EdPoint,
}

impl fmt::Debug for ApiKeyEddsa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiKeyEddsa")
            .field("key_id", &self.key_id)
            .field("public_key", &self.public_key)
            .finish_non_exhaustive()
    }
}

impl ApiKeyEddsa {
    pub fn from_parts(
        key_id: KeyId,
        client_share: [u8; 32],
        enc_server_share: Ciphertext,
        public_key: EdPoint,
    ) -> Result<Self, ProtocolError> {
        let client_share =
            Option::<Scalar>::from(Scalar::from_canonical_bytes(client_share)).ok_or(ProtocolError::ScalarOutOfRange)?;
        Ok(Self { key_id, client_share, enc_server_share, public_key })
    }

    pub fn key_id(&self) -> &KeyId {
        &self.key_id
    }

    /// Client share as 32 little-endian bytes.
    pub fn client_share_bytes(&self) -> [u8; 32] {
        self.client_share.to_bytes()
    }

    pub fn enc_server_share(&self) -> &Ciphertext {
        &self.enc_server_share
    }

    pub fn public_key(&self) -> &EdPoint {
        &self.public_key
    }
}

#[cfg(feature = "test-hooks")]
#[derive(Debug, Clone)]
pub struct EdKeygenAudit {
    pub signing_scalar: Scalar,
    pub server_share: Scalar,
}

/// Splits the signing scalar of `secret` into a random client share and the
/// encrypted server share `a - client mod L`.
pub fn generate_api_key_ed<R: RngCore + CryptoRng>(
    secret: &[u8; 32],
    paillier: &VerifiedPaillierKey,
    rng: &mut R,
) -> Result<ApiKeyEddsa, ProtocolError> {
    generate_ed_inner(secret, paillier, None, rng).map(|(key, _)| key)
}

/// [`generate_api_key_ed`] with an optional pinned client share, returning
/// the plaintext shares for inspection.
#[cfg(feature = "test-hooks")]
pub fn generate_api_key_ed_audited<R: RngCore + CryptoRng>(
    secret: &[u8; 32],
    paillier: &VerifiedPaillierKey,
    client_share: Option<Scalar>,
    rng: &mut R,
) -> Result<(ApiKeyEddsa, EdKeygenAudit), ProtocolError> {
    generate_ed_inner(secret, paillier, client_share, rng).map(|(key, (signing_scalar, server_share))| {
        (key, EdKeygenAudit { signing_scalar, server_share })
    })
}

fn generate_ed_inner<R: RngCore + CryptoRng>(
    secret: &[u8; 32],
    paillier: &VerifiedPaillierKey,
    client_share: Option<Scalar>,
    rng: &mut R,
) -> Result<(ApiKeyEddsa, (Scalar, Scalar)), ProtocolError> {
    if paillier.n() <= &group_order() {
        return Err(ProtocolError::PaillierKeyTooSmall { bits: paillier.bits(), required: 253 });
    }
    let a = signing_scalar(secret);
    let client_share = client_share.unwrap_or_else(|| Scalar::random(rng));
    let server_share = a - client_share;
    let enc_server_share = paillier.encrypt_fresh(&scalar_to_biguint(&server_share), rng)?;
    let public_key = EdPoint::from_point(&(ED25519_BASEPOINT_POINT * a))?;
    let key = ApiKeyEddsa { key_id: KeyId::random(rng), client_share, enc_server_share, public_key };
    Ok((key, (a, server_share)))
}

/// Exchange-side recovery of its share at registration.
pub fn decrypt_server_share(sk: &PaillierSecretKey, enc: &Ciphertext) -> Result<Scalar, ProtocolError> {
    let plain = sk.decrypt(enc)?;
    if plain >= group_order() {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    let mut bytes = [0u8; 32];
    let le = plain.to_bytes_le();
    bytes[..le.len()].copy_from_slice(&le);
    Option::<Scalar>::from(Scalar::from_canonical_bytes(bytes)).ok_or(ProtocolError::ScalarOutOfRange)
}

/// Encodes a Paillier public key check for EdDSA: the modulus must exceed `L`.
pub fn paillier_fits(pk: &PaillierPublicKey) -> bool {
    pk.n() > &group_order()
}

/// Client's prepared nonce: the joint point and its own nonce scalar.
#[derive(Debug)]
pub struct EdClientEntry {
    pub point: EdPoint,
    pub r_c: Scalar,
}

/// Exchange's prepared nonce.
#[derive(Debug)]
pub struct EdServerEntry {
    pub point: EdPoint,
    pub r_s: Scalar,
}

pub fn ed_client_init<R: RngCore + CryptoRng>(rng: &mut R) -> (Scalar, EdPoint) {
    let r_c = random_nonzero_scalar(rng);
    let point = EdPoint::from_point(&(ED25519_BASEPOINT_POINT * r_c)).expect("nonzero multiple of B");
    (r_c, point)
}

/// Exchange's reply to the client point: `(r_s, R_s, R = R_c + R_s)`.
pub fn ed_server_respond<R: RngCore + CryptoRng>(
    client_point: &EdPoint,
    rng: &mut R,
) -> Result<(Scalar, EdPoint, EdPoint), ProtocolError> {
    let r_s = random_nonzero_scalar(rng);
    let (server_point, joint) = ed_server_respond_with(client_point, &r_s)?;
    Ok((r_s, server_point, joint))
}

pub fn ed_server_respond_with(client_point: &EdPoint, r_s: &Scalar) -> Result<(EdPoint, EdPoint), ProtocolError> {
    if *r_s == Scalar::ZERO {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    let server = ED25519_BASEPOINT_POINT * r_s;
    let joint = client_point.point() + server;
    Ok((EdPoint::from_point(&server)?, EdPoint::from_point(&joint)?))
}

/// `R = r_c·B + R_s` on the client.
pub fn ed_client_complete(r_c: &Scalar, server_point: &EdPoint) -> Result<EdPoint, ProtocolError> {
    if *r_c == Scalar::ZERO {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    EdPoint::from_point(&(ED25519_BASEPOINT_POINT * r_c + server_point.point()))
}

/// Runs the one-round preparation locally for both parties.
pub fn ed_prepare<C, S>(client_rng: &mut C, server_rng: &mut S) -> Result<(EdClientEntry, EdServerEntry), ProtocolError>
where
    C: RngCore + CryptoRng,
    S: RngCore + CryptoRng,
{
    let (r_c, client_point) = ed_client_init(client_rng);
    let (r_s, server_point, joint) = ed_server_respond(&client_point, server_rng)?;
    let point = ed_client_complete(&r_c, &server_point)?;
    debug_assert_eq!(point, joint);
    Ok((EdClientEntry { point, r_c }, EdServerEntry { point: joint, r_s }))
}

/// Ed25519 challenge `H(R ‖ A ‖ M) mod L` with `H = SHA-512`.
pub fn challenge(point: &EdPoint, public_key: &EdPoint, message: &[u8]) -> Scalar {
    let mut h = Sha512::new();
    h.update(point.as_bytes());
    h.update(public_key.as_bytes());
    h.update(message);
    Scalar::from_hash(h)
}

/// The client's single finalization message for EdDSA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdPartialSignature {
    pub point: EdPoint,
    pub s_client: Scalar,
}

impl EdPartialSignature {
    /// `R ‖ s_client`, 64 bytes.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(self.point.as_bytes());
        out[32..].copy_from_slice(self.s_client.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() != 64 {
            return Err(EncodingError::Length { expected: 64, actual: bytes.len() }.into());
        }
        let point = EdPoint::from_bytes(&bytes[..32])?;
        let mut s = [0u8; 32];
        s.copy_from_slice(&bytes[32..]);
        let s_client = Option::<Scalar>::from(Scalar::from_canonical_bytes(s)).ok_or(ProtocolError::ScalarOutOfRange)?;
        Ok(Self { point, s_client })
    }
}

/// `s_client = r_c + h·client_share`. Consumes the entry.
pub fn ed_client_sign(key: &ApiKeyEddsa, entry: EdClientEntry, message: &[u8]) -> EdPartialSignature {
    let EdClientEntry { point, r_c } = entry;
    let h = challenge(&point, &key.public_key, message);
    EdPartialSignature { point, s_client: r_c + h * key.client_share }
}

/// A standard 64-byte Ed25519 signature `R ‖ s`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdSignature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for EdSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EdSignature({})", hex::encode(self.0))
    }
}

impl EdSignature {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

/// Adds the exchange's part, `s = s_client + r_s + h·server_share`, and
/// releases the signature only if it verifies.
pub fn ed_server_complete(
    server_share: &Scalar,
    r_s: Scalar,
    partial: &EdPartialSignature,
    message: &[u8],
    public_key: &EdPoint,
) -> Result<EdSignature, ProtocolError> {
    let h = challenge(&partial.point, public_key, message);
    let s = partial.s_client + r_s + h * server_share;
    let mut sig = [0u8; SIGNATURE_LEN];
    sig[..32].copy_from_slice(partial.point.as_bytes());
    sig[32..].copy_from_slice(s.as_bytes());
    let sig = EdSignature(sig);
    if !verify_ed25519(public_key, message, &sig) {
        return Err(ProtocolError::InvalidPartial);
    }
    Ok(sig)
}

/// Cofactorless Ed25519 verification: `s·B = R + h·A` with canonical `s`.
pub fn verify_ed25519(public_key: &EdPoint, message: &[u8], sig: &EdSignature) -> bool {
    let Ok(point) = EdPoint::from_bytes(&sig.0[..32]) else {
        return false;
    };
    let mut s = [0u8; 32];
    s.copy_from_slice(&sig.0[32..]);
    let Some(s) = Option::<Scalar>::from(Scalar::from_canonical_bytes(s)) else {
        return false;
    };
    let h = challenge(&point, public_key, message);
    let lhs = EdwardsPoint::vartime_double_scalar_mul_basepoint(&-h, &public_key.point(), &s);
    lhs == point.point()
}
