//! Non-interactive proof that a Paillier modulus satisfies `gcd(n, φ(n)) = 1`.
//!
//! The verifier derives `m2` challenges `ρ_i` from the modulus with a hash,
//! and the prover answers with the `n`-th roots `σ_i = ρ_i^(n⁻¹ mod φ(n))`.
//! Raising to the `n`-th power is a permutation of `Z_n*` exactly when
//! `gcd(n, φ(n)) = 1`, so a cheating prover cannot produce the roots.
//! The verifier also checks that no prime below `alpha` divides `n`.

use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{prime, PaillierError, PaillierPublicKey, PaillierSecretKey};
use crate::encoding::EncodingError;

const CHALLENGE_DOMAIN: &[u8] = b"apikey-mpc/paillier-correct-key/v1";

/// Soundness parameters. `alpha` bounds the small-prime check and `m2` is
/// the number of `n`-th-root challenges. `m1` is the repetition count of the
/// companion two-prime sub-proof; it is carried so transcripts pin the whole
/// parameter set, but no sub-proof is emitted for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofParams {
    pub alpha: u32,
    pub m1: u32,
    pub m2: u32,
}

impl ProofParams {
    pub const STANDARD: ProofParams = ProofParams { alpha: 6370, m1: 11, m2: 11 };

    /// Parameters for toy moduli such as `n = 35`, whose factors are below
    /// the standard `alpha`.
    pub const INSECURE_TOY: ProofParams = ProofParams { alpha: 5, m1: 11, m2: 11 };
}

impl Default for ProofParams {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyCorrectnessProof {
    pub params: ProofParams,
    #[serde(with = "hex_vec")]
    pub sigma: Vec<BigUint>,
}

impl KeyCorrectnessProof {
    /// Produces the proof with standard parameters.
    pub fn prove(sk: &PaillierSecretKey) -> Result<Self, PaillierError> {
        Self::prove_with(sk, ProofParams::STANDARD)
    }

    pub fn prove_with(sk: &PaillierSecretKey, params: ProofParams) -> Result<Self, PaillierError> {
        let n = sk.public_key().n();
        let phi = sk.phi();
        if !prime::coprime(n, &phi) {
            return Err(PaillierError::InvalidKey("gcd(n, phi(n)) != 1".into()));
        }
        let root_exp = n
            .modinv(&phi)
            .ok_or_else(|| PaillierError::InvalidKey("n not invertible mod phi(n)".into()))?;
        let sigma = challenges(n, params.m2).iter().map(|rho| rho.modpow(&root_exp, n)).collect();
        Ok(Self { params, sigma })
    }

    /// Checks the proof against `pk`, requiring the transcript to carry
    /// exactly `expected` parameters.
    pub fn verify(&self, pk: &PaillierPublicKey, expected: ProofParams) -> Result<(), PaillierError> {
        if self.params != expected {
            return Err(PaillierError::ProofRejected("unexpected proof parameters"));
        }
        let n = pk.n();
        if self.sigma.len() != expected.m2 as usize {
            return Err(PaillierError::ProofRejected("wrong number of responses"));
        }
        if !prime::coprime(n, &primorial(expected.alpha)) {
            return Err(PaillierError::ProofRejected("modulus has a small prime factor"));
        }
        for (sigma, rho) in self.sigma.iter().zip(challenges(n, expected.m2)) {
            if sigma.is_zero() || sigma >= n {
                return Err(PaillierError::ProofRejected("response out of range"));
            }
            if sigma.modpow(n, n) != rho {
                return Err(PaillierError::ProofRejected("response is not an n-th root"));
            }
        }
        Ok(())
    }

    /// Binary transcript: `alpha ‖ m1 ‖ m2 ‖ count ‖ (len ‖ be-bytes)*`, all
    /// prefixes `u32` big-endian, integers without leading zero bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.params.alpha, self.params.m1, self.params.m2, self.sigma.len() as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for s in &self.sigma {
            let bytes = if s.is_zero() { Vec::new() } else { s.to_bytes_be() };
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, EncodingError> {
        let next_u32 = |b: &mut &[u8]| -> Result<u32, EncodingError> {
            let (head, rest) = b.split_first_chunk::<4>().ok_or(EncodingError::Truncated)?;
            *b = rest;
            Ok(u32::from_be_bytes(*head))
        };
        let alpha = next_u32(&mut bytes)?;
        let m1 = next_u32(&mut bytes)?;
        let m2 = next_u32(&mut bytes)?;
        let count = next_u32(&mut bytes)? as usize;
        if count > 1024 {
            return Err(EncodingError::NonCanonical("too many responses"));
        }
        let mut sigma = Vec::with_capacity(count);
        for _ in 0..count {
            let len = next_u32(&mut bytes)? as usize;
            if bytes.len() < len {
                return Err(EncodingError::Truncated);
            }
            let (int, rest) = bytes.split_at(len);
            if int.first() == Some(&0) {
                return Err(EncodingError::NonCanonical("leading zero byte"));
            }
            sigma.push(BigUint::from_bytes_be(int));
            bytes = rest;
        }
        if !bytes.is_empty() {
            return Err(EncodingError::NonCanonical("trailing bytes"));
        }
        Ok(Self { params: ProofParams { alpha, m1, m2 }, sigma })
    }
}

/// A Paillier public key whose correctness proof has been checked.
/// API keys can only be minted against this type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifiedPaillierKey(PaillierPublicKey);

impl VerifiedPaillierKey {
    pub fn verify(pk: PaillierPublicKey, proof: &KeyCorrectnessProof) -> Result<Self, PaillierError> {
        Self::verify_with(pk, proof, ProofParams::STANDARD)
    }

    pub fn verify_with(
        pk: PaillierPublicKey,
        proof: &KeyCorrectnessProof,
        params: ProofParams,
    ) -> Result<Self, PaillierError> {
        proof.verify(&pk, params)?;
        Ok(Self(pk))
    }

    pub fn key(&self) -> &PaillierPublicKey {
        &self.0
    }

    pub fn into_inner(self) -> PaillierPublicKey {
        self.0
    }
}

impl std::ops::Deref for VerifiedPaillierKey {
    type Target = PaillierPublicKey;

    fn deref(&self) -> &PaillierPublicKey {
        &self.0
    }
}

/// Deterministic challenges in `Z_n*`, derived by expanding
/// `SHA-256(domain ‖ n ‖ i ‖ j)` to `bits(n) + 128` bits and reducing mod n.
/// Values sharing a factor with `n` are skipped by bumping the attempt
/// counter; this only ever happens for toy moduli.
fn challenges(n: &BigUint, count: u32) -> Vec<BigUint> {
    let n_bytes = n.to_bytes_be();
    let out_len = (n.bits() as usize + 128).div_ceil(8);
    let mut out = Vec::with_capacity(count as usize);
    let mut attempt: u32 = 0;
    while out.len() < count as usize {
        let index = out.len() as u32;
        let mut buf = Vec::with_capacity(out_len + 32);
        let mut block: u32 = 0;
        while buf.len() < out_len {
            let mut h = Sha256::new();
            h.update(CHALLENGE_DOMAIN);
            h.update((n_bytes.len() as u32).to_be_bytes());
            h.update(&n_bytes);
            h.update(index.to_be_bytes());
            h.update(attempt.to_be_bytes());
            h.update(block.to_be_bytes());
            buf.extend_from_slice(&h.finalize());
            block += 1;
        }
        buf.truncate(out_len);
        let rho = BigUint::from_bytes_be(&buf) % n;
        if !rho.is_zero() && prime::coprime(&rho, n) {
            out.push(rho);
            attempt = 0;
        } else {
            attempt += 1;
        }
    }
    out
}

/// Product of all primes below `alpha`.
fn primorial(alpha: u32) -> BigUint {
    static STANDARD: OnceLock<BigUint> = OnceLock::new();
    let compute = || prime::primes_below(alpha as usize).into_iter().fold(BigUint::one(), |acc, p| acc * p);
    if alpha == ProofParams::STANDARD.alpha {
        STANDARD.get_or_init(compute).clone()
    } else {
        compute()
    }
}

mod hex_vec {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::encoding::{biguint_from_hex, biguint_to_hex};

    pub fn serialize<S: Serializer>(v: &[BigUint], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(biguint_to_hex))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigUint>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| biguint_from_hex(s).map_err(D::Error::custom))
            .collect()
    }
}
