//! The output scripts used by the channel transaction graph, and the
//! witnesses that satisfy each of their spending paths.

use super::{Item, Script, ScriptError, ScriptOp, Witness};
use crate::crypto::{CovenantKeySet, CovenantSignature, Digest20, OtsPublicKey, OtsSignature, Preimage, PublicKeyId, Signature};

fn cov(keyset: &CovenantKeySet, path: Option<u8>) -> ScriptOp {
    ScriptOp::CovenantCheck { keyset: *keyset, path }
}

/// Output spendable by both owners together (`CovAddress`).
pub fn covenant_script(keyset: &CovenantKeySet) -> Script {
    Script::new(vec![cov(keyset, None)])
}

/// Output spendable by one key.
pub fn single_key_script(key: &PublicKeyId) -> Script {
    Script::new(vec![ScriptOp::CSigV(*key)])
}

/// `Unilateral_Exit_out`: the initiator reveals their own timeout preimage.
pub fn unilateral_exit_script(keyset: &CovenantKeySet, h_a: Digest20, h_b: Digest20) -> Script {
    Script::new(vec![
        cov(keyset, None),
        ScriptOp::If,
        ScriptOp::CHashV(h_b),
        ScriptOp::Else,
        ScriptOp::CHashV(h_a),
        ScriptOp::EndIf,
    ])
}

/// The three `CommitExit_out` leaves: assert `esn` (either owner signs),
/// then the timeout leaves keyed by Alice's and Bob's preimage hashes.
/// `h_e`, when present, forces the assert to reveal the tower key.
pub fn commit_exit_leaves(
    keyset: &CovenantKeySet,
    k_a: &OtsPublicKey,
    k_b: &OtsPublicKey,
    esn: u32,
    timeout: u32,
    h_a: Digest20,
    h_b: Digest20,
    h_e: Option<Digest20>,
) -> Vec<Script> {
    let mut assert = vec![
        cov(keyset, Some(1)),
        ScriptOp::If,
        ScriptOp::OtCSigV(vec![k_b.clone()]),
        ScriptOp::CValV(esn),
        ScriptOp::Else,
        ScriptOp::OtCSigV(vec![k_a.clone()]),
        ScriptOp::CValV(esn),
        ScriptOp::EndIf,
    ];
    if let Some(h) = h_e {
        assert.push(ScriptOp::CHashV(h));
    }
    vec![
        Script::new(assert),
        Script::new(vec![cov(keyset, Some(2)), ScriptOp::CSeqV(timeout), ScriptOp::CHashV(h_a)]),
        Script::new(vec![cov(keyset, Some(3)), ScriptOp::CSeqV(timeout), ScriptOp::CHashV(h_b)]),
    ]
}

/// `Ready_out`: finalize after the dispute window, or immediately with both
/// timeout preimages.
pub fn ready_leaves(keyset: &CovenantKeySet, timeout: u32, h_a: Digest20, h_b: Digest20) -> Vec<Script> {
    vec![
        Script::new(vec![cov(keyset, Some(1)), ScriptOp::CSeqV(timeout)]),
        Script::new(vec![cov(keyset, Some(2)), ScriptOp::CHashV(h_a), ScriptOp::CHashV(h_b)]),
    ]
}

/// `PunishX_out`: accepts a one-time signature by the cheater's key on any
/// value strictly below `threshold`.
pub fn punish_script(keyset: &CovenantKeySet, cheater: &OtsPublicKey, threshold: u32) -> Script {
    Script::new(vec![
        cov(keyset, None),
        ScriptOp::OtCSigV(vec![cheater.clone()]),
        ScriptOp::PushInt(threshold),
        ScriptOp::LessThan,
        ScriptOp::Verify,
    ])
}

/// HTLC output: receiver claims with the payment preimage before `expiry`;
/// sender refunds from `expiry` on.
pub fn htlc_leaves(payment_hash: Digest20, expiry: u32, receiver: &PublicKeyId, sender: &PublicKeyId) -> Vec<Script> {
    vec![
        Script::new(vec![
            ScriptOp::BeforeHeightV(expiry),
            ScriptOp::CHashV(payment_hash),
            ScriptOp::CSigV(*receiver),
        ]),
        Script::new(vec![ScriptOp::AbsLockV(expiry), ScriptOp::CSigV(*sender)]),
    ]
}

/// Named spending paths of the standard scripts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SpendPath {
    /// Any single-script covenant output (`CovAddress`).
    Covenant,
    SingleKey,
    /// `Unilateral_Exit_out`; `bob_branch` selects the `H_b` side.
    UnilateralExit { bob_branch: bool },
    /// `CommitExit_out` leaf [1].
    CommitExitAssert { bob_branch: bool, with_tower_key: bool },
    /// `CommitExit_out` leaf [2] (`H_a`) or [3] (`H_b`).
    CommitExitTimeout { bob_branch: bool },
    /// `Ready_out` leaf [1].
    ReadyFinalize,
    /// `Ready_out` leaf [2].
    ReadyFast,
    Punish,
    HtlcClaim,
    HtlcRefund,
}

impl SpendPath {
    /// Tap leaf index revealed by this path, if the output is a tree.
    pub fn leaf_index(&self) -> Option<u32> {
        match self {
            SpendPath::CommitExitAssert { .. } => Some(0),
            SpendPath::CommitExitTimeout { bob_branch: false } => Some(1),
            SpendPath::CommitExitTimeout { bob_branch: true } => Some(2),
            SpendPath::ReadyFinalize | SpendPath::HtlcClaim => Some(0),
            SpendPath::ReadyFast | SpendPath::HtlcRefund => Some(1),
            _ => None,
        }
    }

    /// Covenant path index a signature for this spend must commit to.
    pub fn covenant_path(&self) -> Option<u8> {
        match self {
            SpendPath::Covenant | SpendPath::UnilateralExit { .. } | SpendPath::Punish => Some(0),
            SpendPath::CommitExitAssert { .. } | SpendPath::ReadyFinalize => Some(1),
            SpendPath::CommitExitTimeout { bob_branch: false } | SpendPath::ReadyFast => Some(2),
            SpendPath::CommitExitTimeout { bob_branch: true } => Some(3),
            SpendPath::SingleKey | SpendPath::HtlcClaim | SpendPath::HtlcRefund => None,
        }
    }
}

/// Whatever signing material a caller has on hand for one input.
#[derive(Clone, Debug, Default)]
pub struct SpendMaterial {
    pub covenant: Option<CovenantSignature>,
    pub signature: Option<Signature>,
    pub ots: Option<OtsSignature>,
    pub preimage_a: Option<Preimage>,
    pub preimage_b: Option<Preimage>,
    pub preimage_e: Option<Preimage>,
    pub payment_preimage: Option<Preimage>,
}

/// Arranges the items a path needs in stack order (top last).
pub fn build_witness_for(path: SpendPath, m: &SpendMaterial) -> Result<Witness, ScriptError> {
    fn need<T: Clone>(v: &Option<T>, what: &'static str) -> Result<T, ScriptError> {
        v.clone().ok_or(ScriptError::MissingItem(what))
    }
    let cov = || need(&m.covenant, "covenant signature").map(Item::Covenant);
    let items = match path {
        SpendPath::Covenant => vec![cov()?],
        SpendPath::SingleKey => vec![Item::Sig(need(&m.signature, "signature")?)],
        SpendPath::UnilateralExit { bob_branch } => {
            let p = if bob_branch { need(&m.preimage_b, "P_b")? } else { need(&m.preimage_a, "P_a")? };
            vec![Item::Preimage(p), Item::Bool(bob_branch), cov()?]
        }
        SpendPath::CommitExitAssert { bob_branch, with_tower_key } => {
            let mut v = Vec::new();
            if with_tower_key {
                v.push(Item::Preimage(need(&m.preimage_e, "P_e")?));
            }
            v.push(Item::Ots(need(&m.ots, "OTS signature")?));
            v.push(Item::Bool(bob_branch));
            v.push(cov()?);
            v
        }
        SpendPath::CommitExitTimeout { bob_branch } => {
            let p = if bob_branch { need(&m.preimage_b, "P_b")? } else { need(&m.preimage_a, "P_a")? };
            vec![Item::Preimage(p), cov()?]
        }
        SpendPath::ReadyFinalize => vec![cov()?],
        SpendPath::ReadyFast => vec![
            Item::Preimage(need(&m.preimage_b, "P_b")?),
            Item::Preimage(need(&m.preimage_a, "P_a")?),
            cov()?,
        ],
        SpendPath::Punish => vec![Item::Ots(need(&m.ots, "OTS signature")?), cov()?],
        SpendPath::HtlcClaim => vec![
            Item::Sig(need(&m.signature, "signature")?),
            Item::Preimage(need(&m.payment_preimage, "payment preimage")?),
        ],
        SpendPath::HtlcRefund => vec![Item::Sig(need(&m.signature, "signature")?)],
    };
    Ok(Witness::new(items, path.leaf_index()))
}
