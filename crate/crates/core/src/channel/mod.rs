//! Per-owner protocol engine: setup handshake, the nine-step state update,
//! exits, dispute reactions and closing.

mod engine;
mod message;
pub mod observe;
mod sequence;
mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::CryptoError;
use crate::htlc::HtlcError;
use crate::script::ScriptError;
use crate::txgraph::{TxGraphError, TxKind};

pub use engine::{
    apply_ops, EngineConfig, EngineEvent, EngineRecord, ExitStage, PeerEngine, ProtocolPhase, Resolution,
    DEFAULT_STEP_TIMEOUT,
};
pub use message::{ChannelTerms, Envelope, OffchainMessage, PeerInfo, SetupOffer, TemplatePartial, UpdateOp};
pub use sequence::{ReportSchedule, SequenceManager, DEFAULT_D};
pub use store::{complete, PunishStore, SigBook, SignedPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerRole {
    Alice,
    Bob,
}

impl PeerRole {
    pub fn other(self) -> PeerRole {
        match self {
            PeerRole::Alice => PeerRole::Bob,
            PeerRole::Bob => PeerRole::Alice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("operation not allowed in phase {0}")]
    WrongPhase(String),
    #[error("an update is already in flight")]
    Busy,
    #[error("missing or invalid signature for {kind:?} path {path}")]
    BadSignature { kind: TxKind, path: u8 },
    #[error("handshake mismatch: {0}")]
    HandshakeMismatch(&'static str),
    #[error("funding rejected: {0}")]
    FundingRejected(String),
    #[error("esn {proposed} does not follow {previous}")]
    BadEsn { previous: u32, proposed: u32 },
    #[error("esn {esn} cannot advance further")]
    EsnOverflow { esn: u32 },
    #[error("tower key chain exhausted")]
    KeyChainExhausted,
    #[error("no signed state with isn {0}")]
    UnknownState(u32),
    #[error("unexpected {msg} at step {step}")]
    Unexpected { msg: &'static str, step: u8 },
    #[error("tower packet rejected: {0}")]
    TowerPacket(&'static str),
    #[error("close not possible: {0}")]
    CloseRefused(&'static str),
    #[error(transparent)]
    Htlc(#[from] HtlcError),
    #[error(transparent)]
    TxGraph(#[from] TxGraphError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Script(#[from] ScriptError),
}
