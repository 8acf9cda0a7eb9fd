//! Multiplicative 2-of-2 threshold ECDSA.
//!
//! The full key `x` is split as `x = x1'·x2' mod q`. The client keeps `x2'`
//! in the clear and holds `x1'` only as a Paillier ciphertext under the
//! exchange's key. Nonces are shared the same way, `k = k1·k2`, through a
//! Diffie-Hellman style exchange of `k2·G` and `k1·G` during preparation.
//!
//! To sign digest `m` with nonce point `R` (`r = R.x mod q`) the client
//! builds, entirely under encryption,
//!
//! ```text
//! c3 = Enc(x1')^(k2⁻¹·r·x2') · Enc(k2⁻¹·m + μ·q)
//! ```
//!
//! and the exchange finishes with `s = k1⁻¹·Dec(c3) mod q`. The mask `μ·q`
//! vanishes modulo `q` and statistically hides the share product from the
//! decrypting exchange.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_traits::Zero;
use rand::{CryptoRng, RngCore};

use crate::curve::{CurveId, CurvePoint, COMPRESSED_POINT_LEN};
use crate::encoding::{scalar_to_bytes32, EncodingError};
use crate::paillier::{Ciphertext, EncNonce, PaillierPublicKey, PaillierSecretKey, VerifiedPaillierKey};
use crate::{KeyId, ProtocolError};

/// Smallest Paillier modulus (in bits) that keeps `c3`'s plaintext below
/// `n` for a curve of the given order.
pub fn required_paillier_bits(curve: CurveId) -> u64 {
    3 * curve.order().bits() + 2
}

/// Client-side view of a threshold ECDSA API key.
#[derive(Clone)]
pub struct ApiKeyEcdsa {
    key_id: KeyId,
    curve: CurveId,
    client_share: BigUint,
    enc_server_share: Ciphertext,
    public_key: CurvePoint,
    paillier_pk: PaillierPublicKey,
}

impl fmt::Debug for ApiKeyEcdsa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ApiKeyEcdsa")
            .field("key_id", &self.key_id)
            .field("curve", &self.curve)
            .field("public_key", &self.public_key)
            .finish_non_exhaustive()
    }
}

impl ApiKeyEcdsa {
    /// Reassembles a key loaded from storage, re-checking the invariants
    /// that can be checked without the exchange's secret.
    pub fn from_parts(
        key_id: KeyId,
        curve: CurveId,
        client_share: BigUint,
        enc_server_share: Ciphertext,
        public_key: CurvePoint,
        paillier_pk: PaillierPublicKey,
    ) -> Result<Self, ProtocolError> {
        if client_share.is_zero() || client_share >= *curve.order() {
            return Err(ProtocolError::ScalarOutOfRange);
        }
        if public_key.curve() != curve {
            return Err(ProtocolError::CurveMismatch);
        }
        check_paillier_size(curve, &paillier_pk)?;
        if enc_server_share.key_fingerprint() != paillier_pk.fingerprint() {
            return Err(crate::paillier::PaillierError::KeyMismatch.into());
        }
        Ok(Self { key_id, curve, client_share, enc_server_share, public_key, paillier_pk })
    }

    pub fn key_id(&self) -> &KeyId {
        &self.key_id
    }

    pub fn curve(&self) -> CurveId {
        self.curve
    }

    pub fn client_share(&self) -> &BigUint {
        &self.client_share
    }

    pub fn enc_server_share(&self) -> &Ciphertext {
        &self.enc_server_share
    }

    pub fn public_key(&self) -> &CurvePoint {
        &self.public_key
    }

    pub fn paillier_pk(&self) -> &PaillierPublicKey {
        &self.paillier_pk
    }
}

/// Plaintext exchange share returned by the audited key generator so tests
/// can check `x1'·x2' = x`. Production key generation never exposes it.
#[cfg(feature = "test-hooks")]
#[derive(Debug, Clone)]
pub struct KeygenAudit {
    pub server_share: BigUint,
}

fn check_paillier_size(curve: CurveId, pk: &PaillierPublicKey) -> Result<(), ProtocolError> {
    let required = required_paillier_bits(curve);
    if pk.bits() <= required {
        return Err(ProtocolError::PaillierKeyTooSmall { bits: pk.bits(), required });
    }
    Ok(())
}

/// Splits the full secret `x` into an API key (trusted-dealer keygen).
///
/// Starting from `x1 = 1, x2 = x`, a random resharing scalar `ρ` moves the
/// shares to `x1' = ρ`, `x2' = x·ρ⁻¹`; `x1'` is encrypted for the exchange.
pub fn generate_api_key<R: RngCore + CryptoRng>(
    x: &BigUint,
    curve: CurveId,
    paillier: &VerifiedPaillierKey,
    rng: &mut R,
) -> Result<ApiKeyEcdsa, ProtocolError> {
    generate_inner(x, curve, paillier, None, rng).map(|(key, _)| key)
}

/// [`generate_api_key`] with an optional pinned resharing scalar, also
/// returning the plaintext exchange share.
#[cfg(feature = "test-hooks")]
pub fn generate_api_key_audited<R: RngCore + CryptoRng>(
    x: &BigUint,
    curve: CurveId,
    paillier: &VerifiedPaillierKey,
    resharing: Option<&BigUint>,
    rng: &mut R,
) -> Result<(ApiKeyEcdsa, KeygenAudit), ProtocolError> {
    generate_inner(x, curve, paillier, resharing.cloned(), rng)
        .map(|(key, server_share)| (key, KeygenAudit { server_share }))
}

fn generate_inner<R: RngCore + CryptoRng>(
    x: &BigUint,
    curve: CurveId,
    paillier: &VerifiedPaillierKey,
    resharing: Option<BigUint>,
    rng: &mut R,
) -> Result<(ApiKeyEcdsa, BigUint), ProtocolError> {
    let q = curve.order();
    if x.is_zero() || x >= q {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    check_paillier_size(curve, paillier)?;

    let rho = resharing.unwrap_or_else(|| curve.random_scalar(rng));
    let rho_inv = curve.invert(&rho).ok_or(ProtocolError::ScalarOutOfRange)?;
    let server_share = rho % q;
    let client_share = (x * rho_inv) % q;
    let enc_server_share = paillier.encrypt_fresh(&server_share, rng)?;
    let public_key = curve.mul_base(x)?;

    let key = ApiKeyEcdsa {
        key_id: KeyId::random(rng),
        curve,
        client_share,
        enc_server_share,
        public_key,
        paillier_pk: paillier.key().clone(),
    };
    Ok((key, server_share))
}

/// Client's first preparation step: random `k2` and `R2 = k2·G`.
pub fn dh_client_init<R: RngCore + CryptoRng>(curve: CurveId, rng: &mut R) -> (BigUint, CurvePoint) {
    let k2 = curve.random_scalar(rng);
    let r2 = curve.mul_base(&k2).expect("k2 is nonzero");
    (k2, r2)
}

/// Exchange's reply to `R2`: random `k1`, `R1 = k1·G` and `R = k1·R2`.
pub fn dh_server_respond<R: RngCore + CryptoRng>(
    r2: &CurvePoint,
    rng: &mut R,
) -> Result<(BigUint, CurvePoint, CurvePoint), ProtocolError> {
    let k1 = r2.curve().random_scalar(rng);
    let (r1, r) = dh_server_respond_with(r2, &k1)?;
    Ok((k1, r1, r))
}

/// [`dh_server_respond`] with a caller-chosen `k1`.
pub fn dh_server_respond_with(r2: &CurvePoint, k1: &BigUint) -> Result<(CurvePoint, CurvePoint), ProtocolError> {
    let curve = r2.curve();
    if k1.is_zero() || k1 >= curve.order() {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    Ok((curve.mul_base(k1)?, r2.mul(k1)?))
}

/// Client's last preparation step: `R = k2·R1`.
pub fn dh_client_complete(k2: &BigUint, r1: &CurvePoint) -> Result<CurvePoint, ProtocolError> {
    if k2.is_zero() || k2 >= r1.curve().order() {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    Ok(r1.mul(k2)?)
}

/// One prepared nonce on the client: the joint point, the client's DH
/// secret and the precomputed Paillier randomness.
#[derive(Debug)]
pub struct EcdsaClientEntry {
    pub point: CurvePoint,
    pub k2: BigUint,
    pub nonce: EncNonce,
}

/// The single finalization message payload: `c3` and the nonce point `R`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Presignature {
    pub c3: Ciphertext,
    pub point: CurvePoint,
}

impl Presignature {
    /// `c3` as a fixed-width `n²` integer followed by the compressed `R`.
    /// At 2048-bit Paillier this is 512 + 33 = 545 bytes.
    pub fn to_bytes(&self, pk: &PaillierPublicKey) -> Vec<u8> {
        let mut out = self.c3.to_fixed_bytes(pk);
        out.extend_from_slice(self.point.as_bytes());
        out
    }

    pub fn from_bytes(pk: &PaillierPublicKey, curve: CurveId, bytes: &[u8]) -> Result<Self, ProtocolError> {
        let expected = pk.ciphertext_len() + COMPRESSED_POINT_LEN;
        if bytes.len() != expected {
            return Err(EncodingError::Length { expected, actual: bytes.len() }.into());
        }
        let (c3, point) = bytes.split_at(pk.ciphertext_len());
        Ok(Self { c3: pk.ciphertext_from_fixed_bytes(c3)?, point: CurvePoint::from_bytes(curve, point)? })
    }
}

/// Builds the presignature for digest scalar `m` (already reduced mod q).
///
/// The entry is consumed; its `k2` and Paillier randomness are dropped when
/// this returns, whether or not it succeeds. `r = 0` yields
/// [`ProtocolError::DegenerateNonce`] and the caller moves to the next entry.
pub fn compute_presignature<R: RngCore + CryptoRng>(
    key: &ApiKeyEcdsa,
    entry: EcdsaClientEntry,
    m: &BigUint,
    rng: &mut R,
) -> Result<Presignature, ProtocolError> {
    let curve = key.curve;
    let q = curve.order();
    if entry.point.curve() != curve {
        return Err(ProtocolError::CurveMismatch);
    }
    if m >= q {
        return Err(ProtocolError::ScalarOutOfRange);
    }
    let EcdsaClientEntry { point, k2, nonce } = entry;
    let r = point.x_mod_order();
    if r.is_zero() {
        return Err(ProtocolError::DegenerateNonce);
    }
    let k2_inv = curve.invert(&k2).ok_or(ProtocolError::ScalarOutOfRange)?;
    drop(k2);

    let pk = &key.paillier_pk;
    let mask = rng.gen_biguint_below(&(q * q));
    let share_coeff = (&k2_inv * &r % q) * &key.client_share % q;
    let masked_digest = (&k2_inv * m % q) + mask * q;

    let c1 = pk.mul_scalar(&key.enc_server_share, &share_coeff)?;
    let c2 = pk.encrypt(&masked_digest, nonce)?;
    let c3 = pk.add(&c1, &c2)?;
    Ok(Presignature { c3, point })
}

/// ECDSA signature `(r, s)` with both components in `[1, q)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub r: BigUint,
    pub s: BigUint,
}

impl Signature {
    /// 64-byte `r ‖ s`, each 32-byte big-endian.
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&scalar_to_bytes32(&self.r));
        out[32..].copy_from_slice(&scalar_to_bytes32(&self.s));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncodingError> {
        if bytes.len() != 64 {
            return Err(EncodingError::Length { expected: 64, actual: bytes.len() });
        }
        Ok(Self { r: BigUint::from_bytes_be(&bytes[..32]), s: BigUint::from_bytes_be(&bytes[32..]) })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn is_low_s(&self, curve: CurveId) -> bool {
        self.s <= curve.order() >> 1
    }

    /// Replaces `s` by `q - s` when `s > (q-1)/2`.
    pub fn normalize_s(mut self, curve: CurveId) -> Self {
        if !self.is_low_s(curve) {
            self.s = curve.order() - &self.s;
        }
        self
    }
}

/// Exchange-side completion options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompletionOptions {
    /// Canonicalise `s` to the lower half of the range.
    pub low_s: bool,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        Self { low_s: true }
    }
}

/// Finishes a presignature: `s = k1⁻¹·Dec(c3) mod q`, normalised, and
/// verified against `public_key` before it is returned.
///
/// `k1` is taken by value: it is dropped when this returns, on success and
/// on failure alike.
pub fn complete_signature(
    paillier_sk: &PaillierSecretKey,
    k1: BigUint,
    presig: &Presignature,
    m: &BigUint,
    public_key: &CurvePoint,
    options: CompletionOptions,
) -> Result<Signature, ProtocolError> {
    let curve = public_key.curve();
    if presig.point.curve() != curve {
        return Err(ProtocolError::CurveMismatch);
    }
    let q = curve.order();
    let r = presig.point.x_mod_order();
    if r.is_zero() {
        return Err(ProtocolError::DegenerateNonce);
    }
    let k1_inv = curve.invert(&k1).ok_or(ProtocolError::ScalarOutOfRange)?;
    drop(k1);

    let plain = paillier_sk.decrypt(&presig.c3).map_err(|_| ProtocolError::InvalidPresignature)?;
    let s = (k1_inv * (plain % q)) % q;
    if s.is_zero() {
        return Err(ProtocolError::InvalidPresignature);
    }
    let mut sig = Signature { r, s };
    if options.low_s {
        sig = sig.normalize_s(curve);
    }
    if !verify_ecdsa(public_key, m, &sig) {
        return Err(ProtocolError::InvalidPresignature);
    }
    Ok(sig)
}

/// Standard ECDSA verification of `sig` over digest scalar `m`.
/// Accepts both `s` and `q - s`.
pub fn verify_ecdsa(public_key: &CurvePoint, m: &BigUint, sig: &Signature) -> bool {
    let curve = public_key.curve();
    let q = curve.order();
    if sig.r.is_zero() || sig.r >= *q || sig.s.is_zero() || sig.s >= *q {
        return false;
    }
    let Some(w) = curve.invert(&sig.s) else {
        return false;
    };
    let u1 = (m % q) * &w % q;
    let u2 = &sig.r * &w % q;
    curve.double_mul_x_mod_q(&u1, &u2, public_key).is_some_and(|x| x == sig.r)
}
