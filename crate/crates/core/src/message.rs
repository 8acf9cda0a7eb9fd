//! Message digests shared by client and exchange.
//!
//! Both sides hash the canonical message bytes themselves, so the bytes the
//! policy engine judges are exactly the bytes that get signed.

use num_bigint::BigUint;
use sha2::{Digest, Sha256};

use crate::curve::CurveId;

pub const DIGEST_LEN: usize = 32;

/// SHA-256 over the canonical message bytes.
pub fn message_digest(message: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(message).into()
}

/// Digest interpreted big-endian and reduced modulo the group order. For
/// 256-bit orders this matches the standard ECDSA `bits2int` truncation.
pub fn digest_scalar(curve: CurveId, digest: &[u8; DIGEST_LEN]) -> BigUint {
    BigUint::from_bytes_be(digest) % curve.order()
}
