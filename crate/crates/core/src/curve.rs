//! Short-Weierstrass curve arithmetic for the ECDSA side.
//!
//! Protocol code works with scalars as `BigUint` (they meet Paillier
//! plaintexts constantly) and with points as 33-byte SEC1 compressed
//! encodings. The group law itself is delegated to the RustCrypto curve
//! crates.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{hex_to_array, EncodingError};

pub const COMPRESSED_POINT_LEN: usize = 33;
pub const SCALAR_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CurveError {
    #[error("point encoding is not a valid compressed point on {0}")]
    NotOnCurve(CurveId),
    #[error("point at infinity")]
    Identity,
    #[error("points belong to different curves")]
    CurveMismatch,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveId {
    #[default]
    Secp256k1,
    P256,
}

impl fmt::Display for CurveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveId::Secp256k1 => "secp256k1",
            CurveId::P256 => "p256",
        })
    }
}

impl std::str::FromStr for CurveId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "secp256k1" => Ok(CurveId::Secp256k1),
            "p256" => Ok(CurveId::P256),
            other => Err(format!("unsupported curve `{other}`")),
        }
    }
}

macro_rules! backend {
    ($name:ident, $krate:ident, $variant:ident) => {
        pub mod $name {
            use $krate::elliptic_curve::group::Group as _;
            use $krate::elliptic_curve::point::AffineCoordinates;
            use $krate::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
            use $krate::elliptic_curve::PrimeField;
            use $krate::{AffinePoint, EncodedPoint, FieldBytes, ProjectivePoint, Scalar};
            use num_bigint::BigUint;

            pub fn order_hex() -> &'static str {
                // Scalar::MODULUS is the hex string of the group order.
                <Scalar as PrimeField>::MODULUS
            }

            fn scalar(k: &BigUint) -> Scalar {
                let q = crate::curve::order_of(crate::curve::CurveId::$variant);
                let bytes = crate::encoding::scalar_to_bytes32(&(k % q));
                Option::from(Scalar::from_repr(FieldBytes::clone_from_slice(&bytes)))
                    .expect("reduced scalar is canonical")
            }

            pub fn decode(bytes: &[u8; 33]) -> Option<ProjectivePoint> {
                let ep = EncodedPoint::from_bytes(bytes).ok()?;
                if !ep.is_compressed() {
                    return None;
                }
                let affine: Option<AffinePoint> = AffinePoint::from_encoded_point(&ep).into();
                affine.map(ProjectivePoint::from).filter(|p| !bool::from(p.is_identity()))
            }

            pub fn encode(p: &ProjectivePoint) -> Option<[u8; 33]> {
                if bool::from(p.is_identity()) {
                    return None;
                }
                let ep = p.to_affine().to_encoded_point(true);
                let mut out = [0u8; 33];
                out.copy_from_slice(ep.as_bytes());
                Some(out)
            }

            pub fn mul_base(k: &BigUint) -> Option<[u8; 33]> {
                encode(&(ProjectivePoint::GENERATOR * scalar(k)))
            }

            pub fn mul(p: &[u8; 33], k: &BigUint) -> Option<[u8; 33]> {
                encode(&(decode(p)? * scalar(k)))
            }

            pub fn add(a: &[u8; 33], b: &[u8; 33]) -> Option<[u8; 33]> {
                encode(&(decode(a)? + decode(b)?))
            }

            /// x-coordinate of `u1·G + u2·P`, `None` at infinity.
            pub fn double_mul_x(u1: &BigUint, u2: &BigUint, p: &[u8; 33]) -> Option<BigUint> {
                let sum = ProjectivePoint::GENERATOR * scalar(u1) + decode(p)? * scalar(u2);
                if bool::from(sum.is_identity()) {
                    return None;
                }
                Some(BigUint::from_bytes_be(&sum.to_affine().x()))
            }
        }
    };
}

mod backends {
    backend!(secp256k1, k256, Secp256k1);
    backend!(p256, p256, P256);
}

fn order_of(curve: CurveId) -> &'static BigUint {
    static K1: OnceLock<BigUint> = OnceLock::new();
    static R1: OnceLock<BigUint> = OnceLock::new();
    let parse = |hex: &str| {
        BigUint::parse_bytes(hex.trim_start_matches("0x").as_bytes(), 16).expect("curve order constant")
    };
    match curve {
        CurveId::Secp256k1 => K1.get_or_init(|| parse(backends::secp256k1::order_hex())),
        CurveId::P256 => R1.get_or_init(|| parse(backends::p256::order_hex())),
    }
}

impl CurveId {
    /// Prime order `q` of the base point.
    pub fn order(self) -> &'static BigUint {
        order_of(self)
    }

    pub fn generator(self) -> CurvePoint {
        self.mul_base(&BigUint::one()).expect("generator is not the identity")
    }

    /// `k·G`. Fails only when `k ≡ 0 (mod q)`.
    pub fn mul_base(self, k: &BigUint) -> Result<CurvePoint, CurveError> {
        let bytes = match self {
            CurveId::Secp256k1 => backends::secp256k1::mul_base(k),
            CurveId::P256 => backends::p256::mul_base(k),
        };
        bytes.map(|bytes| CurvePoint { curve: self, bytes }).ok_or(CurveError::Identity)
    }

    /// Uniform scalar in `[1, q)`.
    pub fn random_scalar<R: RngCore + CryptoRng>(self, rng: &mut R) -> BigUint {
        rng.gen_biguint_range(&BigUint::one(), self.order())
    }

    /// `(u1·G + u2·P).x mod q`, or `None` when the sum is the identity.
    pub fn double_mul_x_mod_q(self, u1: &BigUint, u2: &BigUint, p: &CurvePoint) -> Option<BigUint> {
        if p.curve != self {
            return None;
        }
        let x = match self {
            CurveId::Secp256k1 => backends::secp256k1::double_mul_x(u1, u2, &p.bytes),
            CurveId::P256 => backends::p256::double_mul_x(u1, u2, &p.bytes),
        }?;
        Some(x % self.order())
    }

    /// Scalar from 32 big-endian bytes; must already be below `q`.
    pub fn scalar_from_bytes(self, bytes: &[u8]) -> Option<BigUint> {
        if bytes.len() != SCALAR_LEN {
            return None;
        }
        let v = BigUint::from_bytes_be(bytes);
        (v < *self.order()).then_some(v)
    }

    /// Inverse modulo the group order; `None` for zero.
    pub fn invert(self, k: &BigUint) -> Option<BigUint> {
        let q = self.order();
        let k = k % q;
        if k.is_zero() {
            return None;
        }
        k.modinv(q)
    }
}

/// A non-identity curve point in compressed SEC1 form.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CurvePoint {
    curve: CurveId,
    bytes: [u8; COMPRESSED_POINT_LEN],
}

impl fmt::Debug for CurvePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CurvePoint({}, {})", self.curve, hex::encode(self.bytes))
    }
}

impl CurvePoint {
    /// Decodes and validates a compressed point. The identity has no
    /// compressed encoding, so it is rejected here too.
    pub fn from_bytes(curve: CurveId, bytes: &[u8]) -> Result<Self, CurveError> {
        let bytes: [u8; COMPRESSED_POINT_LEN] = bytes
            .try_into()
            .map_err(|_| EncodingError::Length { expected: COMPRESSED_POINT_LEN, actual: bytes.len() })?;
        let valid = match curve {
            CurveId::Secp256k1 => backends::secp256k1::decode(&bytes).is_some(),
            CurveId::P256 => backends::p256::decode(&bytes).is_some(),
        };
        if !valid {
            return Err(CurveError::NotOnCurve(curve));
        }
        Ok(Self { curve, bytes })
    }

    pub fn from_hex(curve: CurveId, s: &str) -> Result<Self, CurveError> {
        Self::from_bytes(curve, &hex_to_array::<COMPRESSED_POINT_LEN>(s)?)
    }

    pub fn curve(&self) -> CurveId {
        self.curve
    }

    pub fn as_bytes(&self) -> &[u8; COMPRESSED_POINT_LEN] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }

    pub fn mul(&self, k: &BigUint) -> Result<CurvePoint, CurveError> {
        let bytes = match self.curve {
            CurveId::Secp256k1 => backends::secp256k1::mul(&self.bytes, k),
            CurveId::P256 => backends::p256::mul(&self.bytes, k),
        };
        bytes.map(|bytes| CurvePoint { curve: self.curve, bytes }).ok_or(CurveError::Identity)
    }

    pub fn add(&self, other: &CurvePoint) -> Result<CurvePoint, CurveError> {
        if self.curve != other.curve {
            return Err(CurveError::CurveMismatch);
        }
        let bytes = match self.curve {
            CurveId::Secp256k1 => backends::secp256k1::add(&self.bytes, &other.bytes),
            CurveId::P256 => backends::p256::add(&self.bytes, &other.bytes),
        };
        bytes.map(|bytes| CurvePoint { curve: self.curve, bytes }).ok_or(CurveError::Identity)
    }

    /// Affine x-coordinate reduced modulo the group order (the ECDSA `r`).
    pub fn x_mod_order(&self) -> BigUint {
        BigUint::from_bytes_be(&self.bytes[1..]) % self.curve.order()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    #[test]
    fn secp256k1_order_and_generator() {
        let q = CurveId::Secp256k1.order();
        assert_eq!(
            q.to_str_radix(16),
            "fffffffffffffffffffffffffffffffebaaedce6af48a03bbfd25e8cd0364141"
        );
        assert_eq!(
            CurveId::Secp256k1.generator().to_hex(),
            "0279be667ef9dcbbac55a06295ce870b07029bfcdb2dce28d959f2815b16f81798"
        );
    }

    #[test]
    fn p256_order() {
        assert_eq!(
            CurveId::P256.order().to_str_radix(16),
            "ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551"
        );
    }

    #[test]
    fn scalar_mult_is_consistent() {
        for curve in [CurveId::Secp256k1, CurveId::P256] {
            let g = curve.generator();
            let six = curve.mul_base(&6u8.into()).unwrap();
            assert_eq!(g.mul(&2u8.into()).unwrap().mul(&3u8.into()).unwrap(), six);
            let two = curve.mul_base(&2u8.into()).unwrap();
            let four = curve.mul_base(&4u8.into()).unwrap();
            assert_eq!(two.add(&four).unwrap(), six);
        }
    }

    #[test]
    fn identity_is_unrepresentable() {
        let curve = CurveId::Secp256k1;
        assert_eq!(curve.mul_base(&BigUint::zero()).unwrap_err(), CurveError::Identity);
        assert_eq!(curve.mul_base(curve.order()).unwrap_err(), CurveError::Identity);
        let k = curve.random_scalar(&mut OsRng);
        let p = curve.mul_base(&k).unwrap();
        let neg = curve.mul_base(&(curve.order() - &k)).unwrap();
        assert_eq!(p.add(&neg).unwrap_err(), CurveError::Identity);
    }

    #[test]
    fn invalid_encodings_rejected() {
        let curve = CurveId::Secp256k1;
        let mut bytes = *curve.generator().as_bytes();
        bytes[0] = 0x05;
        assert!(CurvePoint::from_bytes(curve, &bytes).is_err());
        assert!(CurvePoint::from_bytes(curve, &[0u8; 33]).is_err());
        assert!(CurvePoint::from_bytes(curve, &[2u8; 32]).is_err());
        // x = 5 is not the abscissa of any secp256k1 point.
        let mut off = [0u8; 33];
        off[0] = 2;
        off[32] = 5;
        assert!(CurvePoint::from_bytes(curve, &off).is_err());
    }

    #[test]
    fn inversion() {
        let curve = CurveId::Secp256k1;
        let five = BigUint::from(5u8);
        let inv = curve.invert(&five).unwrap();
        assert_eq!((inv * five) % curve.order(), BigUint::one());
        assert!(curve.invert(&BigUint::zero()).is_none());
    }
}
