//! Wire encodings shared by every module.
//!
//! Big integers travel as lowercase big-endian hex without leading zeros
//! (zero is `"0"`). Curve points and scalars use fixed-width byte strings,
//! also hex encoded when embedded in JSON.

use num_bigint::BigUint;
use num_traits::Zero;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("non-canonical encoding: {0}")]
    NonCanonical(&'static str),
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("truncated input")]
    Truncated,
}

pub fn biguint_to_hex(v: &BigUint) -> String {
    if v.is_zero() {
        "0".to_owned()
    } else {
        v.to_str_radix(16)
    }
}

/// Parses the canonical hex form. Uppercase digits, a `0x` prefix and
/// leading zeros are all rejected so every integer has one encoding.
pub fn biguint_from_hex(s: &str) -> Result<BigUint, EncodingError> {
    if s.is_empty() {
        return Err(EncodingError::NonCanonical("empty string"));
    }
    if !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return Err(EncodingError::Hex(s.chars().take(16).collect()));
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(EncodingError::NonCanonical("leading zero"));
    }
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| EncodingError::Hex(s.chars().take(16).collect()))
}

/// Big-endian encoding left-padded to exactly `width` bytes.
///
/// Panics if `v` does not fit; callers only pass values already reduced
/// below a modulus of that width.
pub fn biguint_to_fixed(v: &BigUint, width: usize) -> Vec<u8> {
    let bytes = v.to_bytes_be();
    assert!(bytes.len() <= width || v.is_zero(), "integer wider than {width} bytes");
    let mut out = vec![0u8; width];
    if !v.is_zero() {
        out[width - bytes.len()..].copy_from_slice(&bytes);
    }
    out
}

pub fn scalar_to_bytes32(v: &BigUint) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&biguint_to_fixed(v, 32));
    out
}

pub fn hex_to_array<const N: usize>(s: &str) -> Result<[u8; N], EncodingError> {
    let bytes = hex::decode(s).map_err(|e| EncodingError::Hex(e.to_string()))?;
    bytes
        .as_slice()
        .try_into()
        .map_err(|_| EncodingError::Length { expected: N, actual: bytes.len() })
}

/// Serde adapter for `BigUint` fields using the canonical hex form.
pub mod serde_biguint {
    use num_bigint::BigUint;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::biguint_to_hex(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        super::biguint_from_hex(&s).map_err(D::Error::custom)
    }
}

/// Serde adapter for fixed-size byte arrays as lowercase hex.
pub mod serde_hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        super::hex_to_array::<N>(&s).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_is_canonical() {
        assert_eq!(biguint_to_hex(&BigUint::zero()), "0");
        assert_eq!(biguint_to_hex(&BigUint::from(0xabcdu32)), "abcd");
        assert_eq!(biguint_from_hex("abcd").unwrap(), BigUint::from(0xabcdu32));
        assert_eq!(biguint_from_hex("0").unwrap(), BigUint::zero());
        assert!(biguint_from_hex("00ab").is_err());
        assert!(biguint_from_hex("ABCD").is_err());
        assert!(biguint_from_hex("0x12").is_err());
        assert!(biguint_from_hex("").is_err());
    }

    #[test]
    fn fixed_width_pads() {
        assert_eq!(biguint_to_fixed(&BigUint::from(1u8), 4), vec![0, 0, 0, 1]);
        assert_eq!(biguint_to_fixed(&BigUint::zero(), 2), vec![0, 0]);
    }
}
