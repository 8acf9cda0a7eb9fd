//! Client/exchange messages. Both transports carry the same JSON: framed
//! TCP sends a whole [`Request`], the HTTP binding sends the inner body to
//! a per-method path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::account::{AccountPublicKey, AccountSignature};
use crate::curve::CurveId;
use crate::paillier::{KeyCorrectnessProof, PaillierPublicKey};
use crate::policy::{canonical_json, Action, DenyCode, SignedPolicy};
use crate::{KeyId, Scheme};

/// Largest frame either side accepts.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub key_id: KeyId,
    pub scheme: Scheme,
    /// ECDSA curve; ignored for EdDSA.
    #[serde(default)]
    pub curve: CurveId,
    /// Hex: 33-byte compressed point for ECDSA, 32-byte Ed25519 key.
    pub public_key: String,
    pub policy: SignedPolicy,
    /// Hex ciphertext of the exchange's EdDSA share.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_server_share: Option<String>,
}

impl RegisterRequest {
    pub fn account_key(&self) -> &AccountPublicKey {
        &self.policy.policy.account_key
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareRequest {
    pub key_id: KeyId,
    /// Hex client points: `R2` for ECDSA, `R_c` for EdDSA.
    pub points: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The single finalization message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignRequest {
    pub key_id: KeyId,
    /// Hex of the exact bytes being signed.
    pub message: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    /// Hex: `c3 ‖ R` for ECDSA, `R ‖ s_client` for EdDSA.
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyUpdateRequest {
    pub key_id: KeyId,
    pub policy: SignedPolicy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CancelRequest {
    pub ticket_id: String,
    /// Account-key signature over [`cancel_message`].
    pub signature: AccountSignature,
}

/// Bytes the account key signs to cancel a deferred request.
pub fn cancel_message(ticket_id: &str) -> Vec<u8> {
    canonical_json(&json!({ "op": "cancel", "ticket_id": ticket_id }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Request {
    Register(RegisterRequest),
    Prepare(PrepareRequest),
    Sign(SignRequest),
    UpdatePolicy(PolicyUpdateRequest),
    Cancel(CancelRequest),
    TicketStatus { ticket_id: String },
    Paillier,
    Health,
}

impl Request {
    pub fn method(&self) -> &'static str {
        match self {
            Request::Register(_) => "register",
            Request::Prepare(_) => "prepare",
            Request::Sign(_) => "sign",
            Request::UpdatePolicy(_) => "update_policy",
            Request::Cancel(_) => "cancel",
            Request::TicketStatus { .. } => "ticket_status",
            Request::Paillier => "paillier",
            Request::Health => "health",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    UnknownKey,
    DuplicateKey,
    InvalidPolicy,
    BadSignature,
    StaleVersion,
    Malformed,
    ReplayedPoint,
    VerificationFailed,
    UnknownTicket,
    TicketNotPending,
    Storage,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::UnknownKey | ErrorCode::UnknownTicket => 404,
            ErrorCode::DuplicateKey | ErrorCode::StaleVersion | ErrorCode::TicketNotPending => 409,
            ErrorCode::ReplayedPoint => 409,
            ErrorCode::BadSignature => 401,
            ErrorCode::InvalidPolicy | ErrorCode::Malformed => 400,
            ErrorCode::VerificationFailed => 422,
            ErrorCode::Storage | ErrorCode::Internal => 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TicketState {
    Pending,
    Released { signature: String },
    Cancelled,
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TicketInfo {
    pub ticket_id: String,
    pub key_id: KeyId,
    pub release_at_ms: u64,
    #[serde(flatten)]
    pub state: TicketState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Registered { key_id: KeyId },
    Prepared { points: Vec<PointReply> },
    Signed { signature: String, signature_id: String },
    Deferred { ticket_id: String, release_at_ms: u64 },
    Denied { code: DenyCode, message: String },
    PolicyUpdated { version: u64 },
    Cancelled { ticket_id: String },
    Ticket(TicketInfo),
    Paillier { public_key: PaillierPublicKey, proof: KeyCorrectnessProof },
    Health { status: String },
    Error { code: ErrorCode, message: String },
}

impl Response {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Response::Error { code, message: message.into() }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            Response::Error { code, .. } => code.http_status(),
            Response::Denied { .. } => 403,
            Response::Deferred { .. } => 202,
            _ => 200,
        }
    }
}

/// Something that answers requests. `peer` is the transport-level source
/// address, which is the only address the policy ever sees.
pub trait Handler: Send + Sync {
    fn handle(&self, request: Request, peer: Option<std::net::IpAddr>) -> Response;
}

/// Writes one frame: a 4-byte big-endian length, then the body.
pub fn write_frame<W: std::io::Write>(w: &mut W, body: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&l| l as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Reads one frame; `None` on a clean end of stream before a new frame.
pub fn read_frame<R: std::io::Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut len[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => filled += n,
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        write_frame(&mut buf, b"").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 5]);
        let mut r = std::io::Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"hello");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
        let mut torn = std::io::Cursor::new(vec![0u8, 0, 0, 9, 1]);
        assert!(read_frame(&mut torn).is_err());
    }

    #[test]
    fn request_tagging() {
        let r = Request::TicketStatus { ticket_id: "t".into() };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"method":"ticket_status","ticket_id":"t"}"#);
        assert_eq!(serde_json::from_str::<Request>(&s).unwrap(), r);
        assert_eq!(serde_json::to_string(&Request::Health).unwrap(), r#"{"method":"health"}"#);
    }

    #[test]
    fn response_tagging() {
        let r = Response::error(ErrorCode::ReplayedPoint, "gone");
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"type":"error","code":"replayed-point","message":"gone"}"#);
        let t = Response::Ticket(TicketInfo {
            ticket_id: "t".into(),
            key_id: KeyId::parse("k").unwrap(),
            release_at_ms: 5,
            state: TicketState::Released { signature: "ab".into() },
        });
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Response>(&s).unwrap(), t);
    }

    #[test]
    fn cancel_message_is_canonical() {
        assert_eq!(cancel_message("abc"), br#"{"op":"cancel","ticket_id":"abc"}"#.to_vec());
    }
}
