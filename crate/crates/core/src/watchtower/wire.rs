//! Client-to-tower messages.
//!
//! Layout of one record, all integers little-endian:
//!
//! ```text
//! channel id   32 bytes
//! tag           1 byte   privacy level (low nibble) | kind << 4
//! length        4 bytes
//! payload       length bytes
//! ```
//!
//! Kinds are 0 = update, 1 = register, 2 = HTLC store. Payloads are JSON for
//! level-1 updates and level-3 registration, raw ciphertext for level 2 and
//! `index (u32) || key (32 bytes)` for level-3 updates.

use serde::{Deserialize, Serialize};

use crate::chain::Transaction;
use crate::channel::{PeerRole, SignedPair};
use crate::crypto::{CovenantKeySet, Digest, OtsPublicKey};
use crate::encoding::{Decoder, Encoder};
use crate::script::OutputLock;
use crate::txgraph::PrivacyLevel;

use super::TowerError;

/// Plaintext size every level-2 packet is padded to.
pub const L2_PAYLOAD_LEN: usize = 16 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerMsgKind {
    Update = 0,
    Register = 1,
    HtlcStore = 2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerMessage {
    pub channel: Digest,
    pub level: PrivacyLevel,
    pub kind: TowerMsgKind,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
}

impl TowerMessage {
    pub fn tag(&self) -> u8 {
        (self.level as u8) | ((self.kind as u8) << 4)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.digest(&self.channel).u8(self.tag()).bytes(&self.payload);
        e.finish()
    }

    pub fn decode(data: &[u8]) -> Result<TowerMessage, TowerError> {
        let mut d = Decoder::new(data);
        let bad = |_| TowerError::Malformed("truncated record");
        let channel = d.digest().map_err(bad)?;
        let tag = d.u8().map_err(bad)?;
        let payload = d.bytes().map_err(bad)?.to_vec();
        if d.remaining() != 0 {
            return Err(TowerError::Malformed("trailing bytes"));
        }
        let level = PrivacyLevel::try_from(tag & 0x0f).map_err(|_| TowerError::Malformed("level"))?;
        let kind = match tag >> 4 {
            0 => TowerMsgKind::Update,
            1 => TowerMsgKind::Register,
            2 => TowerMsgKind::HtlcStore,
            _ => return Err(TowerError::Malformed("kind")),
        };
        Ok(TowerMessage { channel, level, kind, payload })
    }
}

/// Decrypted level-2 packet body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct L2Payload {
    pub wt_disputes: Transaction,
    pub pair: SignedPair,
}

/// Pads a JSON body to [`L2_PAYLOAD_LEN`]; `None` gives the empty packet
/// sent before any state is revoked.
pub fn pad_l2(payload: Option<&L2Payload>) -> Vec<u8> {
    let body = payload.map(|p| serde_json::to_vec(p).expect("serializable")).unwrap_or_default();
    assert!(body.len() + 4 <= L2_PAYLOAD_LEN, "level-2 payload of {} bytes exceeds packet size", body.len());
    let mut out = Vec::with_capacity(L2_PAYLOAD_LEN);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.resize(L2_PAYLOAD_LEN, 0);
    out
}

pub fn unpad_l2(data: &[u8]) -> Result<Option<L2Payload>, TowerError> {
    let mut d = Decoder::new(data);
    let n = d.u32().map_err(|_| TowerError::Malformed("l2 length"))? as usize;
    if n == 0 {
        return Ok(None);
    }
    let body = d.take(n).map_err(|_| TowerError::Malformed("l2 body"))?;
    serde_json::from_slice(body).map(Some).map_err(|_| TowerError::Malformed("l2 json"))
}

/// What a level-3 tower learns once, at registration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct L3Registration {
    pub client: PeerRole,
    pub keyset: CovenantKeySet,
    pub cheater_key: OtsPublicKey,
    pub beneficiary: OutputLock,
    pub reward: Option<(u64, OutputLock)>,
    pub epsilon: u64,
}

pub fn encode_l3_key(index: u32, key: &Digest) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(index).digest(key);
    e.finish()
}

pub fn decode_l3_key(data: &[u8]) -> Result<(u32, Digest), TowerError> {
    let mut d = Decoder::new(data);
    let bad = |_| TowerError::Malformed("l3 key");
    let i = d.u32().map_err(bad)?;
    let k = d.digest().map_err(bad)?;
    Ok((i, k))
}
