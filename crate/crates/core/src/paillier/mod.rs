//! Paillier encryption with `g = n + 1` and precomputable randomness.
//!
//! Encryption is split in two: [`PaillierPublicKey::precompute_nonce`] does
//! the expensive `r^n mod n²` ahead of time, after which
//! [`PaillierPublicKey::encrypt`] costs a single modular multiplication.
//! This is what lets the signing protocol move nearly all client work into
//! the preparation phase.

mod prime;
mod proof;

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{self, biguint_from_hex, biguint_to_hex, EncodingError};

pub use prime::{is_probable_prime, primes_below, random_prime, MILLER_RABIN_ROUNDS};
pub use proof::{KeyCorrectnessProof, ProofParams, VerifiedPaillierKey};

/// Modulus sizes the key generator accepts outside test mode.
pub const SUPPORTED_KEY_BITS: [u64; 6] = [512, 1024, 2048, 3072, 4096, 8192];
pub const DEFAULT_KEY_BITS: u64 = 2048;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PaillierError {
    #[error("plaintext is not below the modulus")]
    PlaintextOutOfRange,
    #[error("operands belong to different Paillier keys")]
    KeyMismatch,
    #[error("malformed ciphertext: {0}")]
    MalformedCiphertext(&'static str),
    #[error("invalid encryption nonce: {0}")]
    InvalidNonce(&'static str),
    #[error("invalid Paillier key: {0}")]
    InvalidKey(String),
    #[error("unsupported key size {0} bits")]
    UnsupportedKeySize(u64),
    #[error("key correctness proof rejected: {0}")]
    ProofRejected(&'static str),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// Whether small, insecure parameters are acceptable. Toy keys such as
/// `n = 35` exist only so tests can enumerate every plaintext and nonce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KeyMode {
    #[default]
    Standard,
    InsecureTest,
}

/// SHA-256 over the big-endian modulus; identifies a key in files and
/// ciphertexts.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyFingerprint([u8; 32]);

impl KeyFingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyFingerprint({})", &self.to_hex()[..16])
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_sq: BigUint,
    fingerprint: KeyFingerprint,
}

impl fmt::Debug for PaillierPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierPublicKey")
            .field("bits", &self.n.bits())
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl PaillierPublicKey {
    /// Wraps a modulus. Only structural checks are possible here (odd,
    /// larger than 1); well-formedness comes from the correctness proof.
    pub fn from_modulus(n: BigUint) -> Result<Self, PaillierError> {
        if n <= BigUint::one() || n.is_even() {
            return Err(PaillierError::InvalidKey("modulus must be odd and greater than one".into()));
        }
        let n_sq = &n * &n;
        let fingerprint = KeyFingerprint(Sha256::digest(n.to_bytes_be()).into());
        Ok(Self { n, n_sq, fingerprint })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_sq
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.fingerprint
    }

    /// Width in bytes of a fixed-size ciphertext encoding (`n²`).
    pub fn ciphertext_len(&self) -> usize {
        (self.n_sq.bits() as usize).div_ceil(8)
    }

    /// Samples `r` coprime to `n` with `1 < r < n` and precomputes `r^n mod n²`.
    pub fn precompute_nonce<R: RngCore + CryptoRng>(&self, rng: &mut R) -> EncNonce {
        let two = BigUint::from(2u8);
        loop {
            let r = rng.gen_biguint_range(&two, &self.n);
            if let Ok(nonce) = self.nonce_from_r(r) {
                return nonce;
            }
        }
    }

    /// Builds a nonce from a chosen `r`. Trivial (`r <= 1`), out-of-range and
    /// non-unit values are refused.
    pub fn nonce_from_r(&self, r: BigUint) -> Result<EncNonce, PaillierError> {
        if r <= BigUint::one() {
            return Err(PaillierError::InvalidNonce("r must exceed 1"));
        }
        if r >= self.n {
            return Err(PaillierError::InvalidNonce("r must be below n"));
        }
        if !prime::coprime(&r, &self.n) {
            return Err(PaillierError::InvalidNonce("r shares a factor with n"));
        }
        let r_pow = r.modpow(&self.n, &self.n_sq);
        Ok(EncNonce { r_enc: r, r_pow, key: self.fingerprint })
    }

    /// Restores a nonce persisted with [`EncNonce::to_parts`]. The stored
    /// power is trusted (pool storage is authenticated); only ranges are checked.
    pub fn nonce_from_parts(&self, r_enc: BigUint, r_pow: BigUint) -> Result<EncNonce, PaillierError> {
        if r_enc <= BigUint::one() || r_enc >= self.n {
            return Err(PaillierError::InvalidNonce("r out of range"));
        }
        if r_pow.is_zero() || r_pow >= self.n_sq {
            return Err(PaillierError::InvalidNonce("r^n out of range"));
        }
        Ok(EncNonce { r_enc, r_pow, key: self.fingerprint })
    }

    /// `(1 + m·n) · r^n mod n²`. Consumes the nonce, so no nonce can ever
    /// encrypt twice.
    pub fn encrypt(&self, m: &BigUint, nonce: EncNonce) -> Result<Ciphertext, PaillierError> {
        if nonce.key != self.fingerprint {
            return Err(PaillierError::KeyMismatch);
        }
        if *m >= self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let gm = (BigUint::one() + m * &self.n) % &self.n_sq;
        Ok(Ciphertext { value: (gm * &nonce.r_pow) % &self.n_sq, key: self.fingerprint })
    }

    /// Encryption with a freshly sampled nonce (keygen path, not latency critical).
    pub fn encrypt_fresh<R: RngCore + CryptoRng>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        let nonce = self.precompute_nonce(rng);
        self.encrypt(m, nonce)
    }

    /// Homomorphic addition: `Dec(add(c1, c2)) = m1 + m2 mod n`.
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        self.check_own(c1)?;
        self.check_own(c2)?;
        Ok(Ciphertext { value: (&c1.value * &c2.value) % &self.n_sq, key: self.fingerprint })
    }

    /// Homomorphic scalar multiplication: `Dec(mul_scalar(c, a)) = a·m mod n`.
    pub fn mul_scalar(&self, c: &Ciphertext, a: &BigUint) -> Result<Ciphertext, PaillierError> {
        self.check_own(c)?;
        Ok(Ciphertext { value: c.value.modpow(a, &self.n_sq), key: self.fingerprint })
    }

    /// Binds a raw integer to this key, checking `0 < c < n²` and `gcd(c, n) = 1`.
    pub fn ciphertext(&self, value: BigUint) -> Result<Ciphertext, PaillierError> {
        if value.is_zero() || value >= self.n_sq {
            return Err(PaillierError::MalformedCiphertext("value out of range"));
        }
        if !prime::coprime(&value, &self.n) {
            return Err(PaillierError::MalformedCiphertext("value shares a factor with n"));
        }
        Ok(Ciphertext { value, key: self.fingerprint })
    }

    pub fn ciphertext_from_hex(&self, s: &str) -> Result<Ciphertext, PaillierError> {
        self.ciphertext(biguint_from_hex(s)?)
    }

    /// Parses the fixed-width big-endian encoding produced by
    /// [`Ciphertext::to_fixed_bytes`].
    pub fn ciphertext_from_fixed_bytes(&self, bytes: &[u8]) -> Result<Ciphertext, PaillierError> {
        if bytes.len() != self.ciphertext_len() {
            return Err(EncodingError::Length { expected: self.ciphertext_len(), actual: bytes.len() }.into());
        }
        self.ciphertext(BigUint::from_bytes_be(bytes))
    }

    fn check_own(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.key != self.fingerprint {
            return Err(PaillierError::KeyMismatch);
        }
        Ok(())
    }
}

impl Serialize for PaillierPublicKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("PaillierPublicKey", 1)?;
        st.serialize_field("n", &biguint_to_hex(&self.n))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for PaillierPublicKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            #[serde(with = "encoding::serde_biguint")]
            n: BigUint,
        }
        let w = Wire::deserialize(d)?;
        PaillierPublicKey::from_modulus(w.n).map_err(serde::de::Error::custom)
    }
}

/// Factorisation of the modulus plus the CRT constants used by decryption.
#[derive(Clone)]
pub struct PaillierSecretKey {
    public: PaillierPublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    // L(g^λ mod n²)^-1 mod n, for the reference decryption route.
    mu: BigUint,
    p_sq: BigUint,
    q_sq: BigUint,
    h_p: BigUint,
    h_q: BigUint,
    q_inv_p: BigUint,
}

impl fmt::Debug for PaillierSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierSecretKey").field("public", &self.public).finish_non_exhaustive()
    }
}

impl PaillierSecretKey {
    /// Generates a key with a modulus of `bits` bits from the supported set.
    pub fn generate<R: RngCore + CryptoRng>(bits: u64, rng: &mut R) -> Result<Self, PaillierError> {
        Self::generate_with_mode(bits, KeyMode::Standard, rng)
    }

    pub fn generate_with_mode<R: RngCore + CryptoRng>(
        bits: u64,
        mode: KeyMode,
        rng: &mut R,
    ) -> Result<Self, PaillierError> {
        check_size(bits, mode)?;
        if bits < 16 || !bits.is_multiple_of(2) {
            return Err(PaillierError::UnsupportedKeySize(bits));
        }
        loop {
            let p = prime::random_prime(bits / 2, rng);
            let q = prime::random_prime(bits / 2, rng);
            match Self::from_primes_unchecked(p, q) {
                Ok(sk) => return Ok(sk),
                // p == q or gcd(n, φ(n)) != 1: resample.
                Err(_) => continue,
            }
        }
    }

    /// Builds a key from two primes. Primality is checked with
    /// Miller-Rabin; in standard mode the modulus size must be supported.
    pub fn from_primes(p: BigUint, q: BigUint, mode: KeyMode) -> Result<Self, PaillierError> {
        let mut rng = rand::rngs::OsRng;
        for f in [&p, &q] {
            if !prime::is_probable_prime(f, MILLER_RABIN_ROUNDS, &mut rng) {
                return Err(PaillierError::InvalidKey("factor is not prime".into()));
            }
        }
        if mode == KeyMode::Standard {
            let bits = (&p * &q).bits();
            if !SUPPORTED_KEY_BITS.iter().any(|&b| bits == b || bits + 1 == b) {
                return Err(PaillierError::UnsupportedKeySize(bits));
            }
        }
        Self::from_primes_unchecked(p, q)
    }

    fn from_primes_unchecked(p: BigUint, q: BigUint) -> Result<Self, PaillierError> {
        if p == q {
            return Err(PaillierError::InvalidKey("p and q must differ".into()));
        }
        let one = BigUint::one();
        let n = &p * &q;
        let phi = (&p - &one) * (&q - &one);
        if !prime::coprime(&n, &phi) {
            return Err(PaillierError::InvalidKey("gcd(n, phi(n)) != 1".into()));
        }
        let public = PaillierPublicKey::from_modulus(n)?;
        let lambda = (&p - &one).lcm(&(&q - &one));
        let g = public.n() + &one;

        let l_n = l_function(&g.modpow(&lambda, public.n_squared()), public.n());
        let mu = l_n
            .modinv(public.n())
            .ok_or_else(|| PaillierError::InvalidKey("L(g^lambda) not invertible".into()))?;

        let p_sq = &p * &p;
        let q_sq = &q * &q;
        let h_p = l_function(&g.modpow(&(&p - &one), &p_sq), &p)
            .modinv(&p)
            .ok_or_else(|| PaillierError::InvalidKey("h_p not invertible".into()))?;
        let h_q = l_function(&g.modpow(&(&q - &one), &q_sq), &q)
            .modinv(&q)
            .ok_or_else(|| PaillierError::InvalidKey("h_q not invertible".into()))?;
        let q_inv_p = (&q % &p)
            .modinv(&p)
            .ok_or_else(|| PaillierError::InvalidKey("q not invertible mod p".into()))?;

        Ok(Self { public, p, q, lambda, mu, p_sq, q_sq, h_p, h_q, q_inv_p })
    }

    pub fn public_key(&self) -> &PaillierPublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    pub(crate) fn phi(&self) -> BigUint {
        (&self.p - 1u8) * (&self.q - 1u8)
    }

    /// Decrypts via the CRT split over `p²` and `q²`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.check(c)?;
        let one = BigUint::one();
        let c_p = &c.value % &self.p_sq;
        let c_q = &c.value % &self.q_sq;
        let m_p = (l_function(&c_p.modpow(&(&self.p - &one), &self.p_sq), &self.p) * &self.h_p) % &self.p;
        let m_q = (l_function(&c_q.modpow(&(&self.q - &one), &self.q_sq), &self.q) * &self.h_q) % &self.q;
        // m = m_q + q·((m_p - m_q)·q^-1 mod p)
        let diff = (&m_p + &self.p - (&m_q % &self.p)) % &self.p;
        let h = (diff * &self.q_inv_p) % &self.p;
        Ok(m_q + h * &self.q)
    }

    /// Textbook decryption `L(c^λ mod n²)·μ mod n`. Slower than
    /// [`decrypt`](Self::decrypt); kept as an independent route for tests.
    pub fn decrypt_with_lambda(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.check(c)?;
        let n = self.public.n();
        let u = c.value.modpow(&self.lambda, self.public.n_squared());
        Ok((l_function(&u, n) * &self.mu) % n)
    }

    fn check(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.key != self.public.fingerprint {
            return Err(PaillierError::KeyMismatch);
        }
        if c.value.is_zero() || c.value >= *self.public.n_squared() {
            return Err(PaillierError::MalformedCiphertext("value out of range"));
        }
        if !prime::coprime(&c.value, self.public.n()) {
            return Err(PaillierError::MalformedCiphertext("value shares a factor with n"));
        }
        Ok(())
    }
}

impl Serialize for PaillierSecretKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("PaillierSecretKey", 2)?;
        st.serialize_field("p", &biguint_to_hex(&self.p))?;
        st.serialize_field("q", &biguint_to_hex(&self.q))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for PaillierSecretKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            #[serde(with = "encoding::serde_biguint")]
            p: BigUint,
            #[serde(with = "encoding::serde_biguint")]
            q: BigUint,
        }
        let w = Wire::deserialize(d)?;
        // Stored keys were validated at generation; skip the primality pass.
        PaillierSecretKey::from_primes_unchecked(w.p, w.q).map_err(serde::de::Error::custom)
    }
}

fn check_size(bits: u64, mode: KeyMode) -> Result<(), PaillierError> {
    match mode {
        KeyMode::Standard if !SUPPORTED_KEY_BITS.contains(&bits) => Err(PaillierError::UnsupportedKeySize(bits)),
        _ => Ok(()),
    }
}

/// `L(x) = (x - 1) / d`.
fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u8) / d
}

/// A Paillier ciphertext bound to the key that produced it.
#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key: KeyFingerprint,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bits)", self.value.bits())
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_fingerprint(&self) -> KeyFingerprint {
        self.key
    }

    pub fn to_hex(&self) -> String {
        biguint_to_hex(&self.value)
    }

    /// Big-endian, left-padded to the byte width of `n²`.
    pub fn to_fixed_bytes(&self, pk: &PaillierPublicKey) -> Vec<u8> {
        encoding::biguint_to_fixed(&self.value, pk.ciphertext_len())
    }
}

/// Precomputed encryption randomness: `r` and `r^n mod n²`.
///
/// Deliberately not `Clone`: a nonce is moved into exactly one encryption.
pub struct EncNonce {
    r_enc: BigUint,
    r_pow: BigUint,
    key: KeyFingerprint,
}

impl fmt::Debug for EncNonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("EncNonce(..)")
    }
}

impl EncNonce {
    pub fn r_enc(&self) -> &BigUint {
        &self.r_enc
    }

    pub fn r_pow(&self) -> &BigUint {
        &self.r_pow
    }

    /// Splits the nonce for persistence; restore with
    /// [`PaillierPublicKey::nonce_from_parts`].
    pub fn to_parts(&self) -> (BigUint, BigUint) {
        (self.r_enc.clone(), self.r_pow.clone())
    }
}
