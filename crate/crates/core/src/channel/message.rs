//! Off-chain messages exchanged by the two owners.

use serde::{Deserialize, Serialize};

use crate::chain::Outpoint;
use crate::crypto::{CipherPacket, Digest, Digest20, OtsPublicKey, PartialCovenantSig, Preimage, PublicKeyId, Signature};
use crate::htlc::Htlc;
use crate::txgraph::{FundingInput, PrivacyLevel, TxKind};

use super::PeerRole;

/// One owner's covenant partial for one template path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatePartial {
    pub kind: TxKind,
    pub path: u8,
    pub sig: PartialCovenantSig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum UpdateOp {
    Pay { from: PeerRole, amount: u64 },
    AddHtlc { htlc: Htlc },
    SettleHtlc { id: u32, preimage: Preimage },
    FailHtlc { id: u32 },
}

/// Terms both owners must agree on before building anything.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTerms {
    pub epsilon: u64,
    pub timeout: u32,
    pub level: PrivacyLevel,
    pub wt_outputs: bool,
    pub tower_reward: u64,
    pub chain_len: u32,
}

/// An owner's half of the setup handshake.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerInfo {
    pub key: PublicKeyId,
    pub preimage_hash: Digest20,
    pub ots_key: OtsPublicKey,
    pub deposit: u64,
    pub funding: Vec<FundingInput>,
    pub tower_key: Option<PublicKeyId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetupOffer {
    pub info: PeerInfo,
    pub terms: ChannelTerms,
    pub esn0: u32,
    /// Level 2 tower key, shared by both owners.
    pub p_e: Option<Preimage>,
    pub wt_nonce: Option<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OffchainMessage {
    SetupOffer(Box<SetupOffer>),
    SetupAccept { info: Box<PeerInfo>, partials: Vec<TemplatePartial> },
    /// Level 3: encrypted tower signatures for the CommitExit being built.
    TowerPacket { partials: Vec<TemplatePartial>, packet: CipherPacket },
    Propose { esn: u32, ops: Vec<UpdateOp>, partials: Vec<TemplatePartial> },
    StepAck { partials: Vec<TemplatePartial>, packet: Option<CipherPacket> },
    SigBundle { partials: Vec<TemplatePartial> },
    KeyReveal { index: u32, key: Digest },
    FundingSigs { sigs: Vec<(Outpoint, Signature)> },
    CloseRequest { fee: u64, partials: Vec<TemplatePartial> },
    CloseAccept { partials: Vec<TemplatePartial> },
    Abort { reason: String },
}

impl OffchainMessage {
    pub fn name(&self) -> &'static str {
        match self {
            OffchainMessage::SetupOffer(_) => "setup_offer",
            OffchainMessage::SetupAccept { .. } => "setup_accept",
            OffchainMessage::TowerPacket { .. } => "tower_packet",
            OffchainMessage::Propose { .. } => "propose",
            OffchainMessage::StepAck { .. } => "step_ack",
            OffchainMessage::SigBundle { .. } => "sig_bundle",
            OffchainMessage::KeyReveal { .. } => "key_reveal",
            OffchainMessage::FundingSigs { .. } => "funding_sigs",
            OffchainMessage::CloseRequest { .. } => "close_request",
            OffchainMessage::CloseAccept { .. } => "close_accept",
            OffchainMessage::Abort { .. } => "abort",
        }
    }
}

/// Every message carries the state it belongs to and the protocol step
/// that produced it (0 for setup and closing).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub channel: Digest,
    pub isn: u32,
    pub step: u8,
    pub body: OffchainMessage,
}
