use thiserror::Error;

use crate::curve::CurveError;
use crate::encoding::EncodingError;
use crate::paillier::PaillierError;

/// Failures of the two-party signing protocols.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("secret scalar out of range")]
    ScalarOutOfRange,
    #[error("Paillier modulus has {bits} bits; at least {required} are needed for this curve")]
    PaillierKeyTooSmall { bits: u64, required: u64 },
    #[error("invalid point: {0}")]
    Point(#[from] CurveError),
    #[error("received a low-order point")]
    LowOrderPoint,
    #[error("nonce point yields a zero signature component; discard the entry and retry")]
    DegenerateNonce,
    #[error("presignature does not complete to a valid signature")]
    InvalidPresignature,
    #[error("partial signature does not complete to a valid signature")]
    InvalidPartial,
    #[error("inputs use different curves")]
    CurveMismatch,
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}
