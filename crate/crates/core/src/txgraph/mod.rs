//! Builders for every transaction of the channel graph. All builders are
//! pure: the same parameters and state always give byte-identical
//! templates, which is what lets both owners (and level-3 towers) sign and
//! rebuild transactions independently.

mod weight;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Outpoint, Transaction, TxIn, TxOut};
use crate::channel::PeerRole;
use crate::crypto::{CipherPacket, CovenantKeySet, Digest, Digest20, OtsPublicKey, PublicKeyId, IV_LEN, TAG_LEN};
use crate::htlc::Htlc;
use crate::script::{lock_of, templates, OutputLock, ScriptError, SpendMaterial, SpendPath};

pub use weight::{
    estimate_weight, exit_path_report, TxWeight, WeightLine, WeightReport, AGGREGATE_INPUT_WU,
    FINALIZE_2IN_2OUT_WU, P2WPKH_OUTPUT_WU, PREIMAGE_WU, SIGNED_SEQUENCE_WU,
};

/// Plaintext size of a level-3 tower packet: two aggregated signatures.
pub const L3_SIGS_LEN: usize = 2 * crate::crypto::COVENANT_SIG_LEN;
/// Size of one encrypted level-3 packet on chain.
pub const L3_PACKET_LEN: usize = IV_LEN + L3_SIGS_LEN + TAG_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PrivacyLevel {
    L1 = 1,
    L2 = 2,
    L3 = 3,
}

impl TryFrom<u8> for PrivacyLevel {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(PrivacyLevel::L1),
            2 => Ok(PrivacyLevel::L2),
            3 => Ok(PrivacyLevel::L3),
            _ => Err(format!("privacy level must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<PrivacyLevel> for u8 {
    fn from(l: PrivacyLevel) -> u8 {
        l as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Setup,
    WtDisputes,
    StartExit,
    CommitExit,
    AssertExitState,
    FinalizeExit,
    ExpireAliceExit,
    ExpireBobExit,
    CommitPunishAlice,
    PunishAlice,
    CommitPunishBob,
    PunishBob,
    WtbCommitPunishAlice,
    WtbPunishAlice,
    WtaCommitPunishBob,
    WtaPunishBob,
    CooperativeClose,
    /// Spends an HTLC output of FinalizeExit.
    HtlcClaim,
    HtlcRefund,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxGraphError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(&'static str),
    #[error("{role:?} funds {available}, needs {needed}")]
    InsufficientFunding { role: PeerRole, needed: u64, available: u64 },
    #[error("state 0 has no punishment set")]
    StateZero,
    #[error("operation needs privacy level 2 or 3")]
    WrongLevel,
    #[error("balances {total} do not add up to {i_bal}")]
    Conservation { total: u64, i_bal: u64 },
    #[error("esn {esn} below isn {isn}")]
    EsnBelowIsn { isn: u32, esn: u32 },
    #[error("cooperative close fee {fee} exceeds balances")]
    CloseFee { fee: u64 },
    #[error(transparent)]
    Script(#[from] ScriptError),
}

/// Fixed parameters both owners agree on at setup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub i_bal: u64,
    pub epsilon: u64,
    /// Dispute window in blocks (relative timelock).
    pub timeout: u32,
    pub alice_key: PublicKeyId,
    pub bob_key: PublicKeyId,
    pub h_a: Digest20,
    pub h_b: Digest20,
    pub k_a: OtsPublicKey,
    pub k_b: OtsPublicKey,
    pub keyset: CovenantKeySet,
    pub level: PrivacyLevel,
    /// Level 1 only: give towers their own dispute outputs. Without them a
    /// tower reuses its client's CommitPunish path.
    pub wt_outputs: bool,
    /// Level 2: hash of the key that unlocks tower packets, revealed by
    /// every AssertExitState.
    pub h_e: Option<Digest20>,
    /// Levels 2 and 3: private nonce making the tower anchor txid
    /// unpredictable.
    pub wt_nonce: Option<Digest>,
    pub tower_reward: u64,
    pub tower_a_key: Option<PublicKeyId>,
    pub tower_b_key: Option<PublicKeyId>,
    /// Level 3 key chain length.
    pub chain_len: u32,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), TxGraphError> {
        if self.i_bal == 0 {
            return Err(TxGraphError::InvalidParams("I_BAL must be positive"));
        }
        if self.epsilon == 0 {
            return Err(TxGraphError::InvalidParams("epsilon must be positive"));
        }
        if self.timeout == 0 {
            return Err(TxGraphError::InvalidParams("timeout must be at least one block"));
        }
        if self.tower_reward > self.epsilon {
            return Err(TxGraphError::InvalidParams("tower reward exceeds epsilon"));
        }
        if self.level == PrivacyLevel::L2 && self.h_e.is_none() {
            return Err(TxGraphError::InvalidParams("level 2 needs H_e"));
        }
        if self.level >= PrivacyLevel::L2 && self.wt_nonce.is_none() {
            return Err(TxGraphError::InvalidParams("levels 2 and 3 need the anchor nonce"));
        }
        Ok(())
    }

    pub fn key(&self, role: PeerRole) -> PublicKeyId {
        match role {
            PeerRole::Alice => self.alice_key,
            PeerRole::Bob => self.bob_key,
        }
    }

    pub fn address(&self, role: PeerRole) -> OutputLock {
        OutputLock::ScriptHash(templates::single_key_script(&self.key(role)))
    }

    pub fn ots_key(&self, role: PeerRole) -> &OtsPublicKey {
        match role {
            PeerRole::Alice => &self.k_a,
            PeerRole::Bob => &self.k_b,
        }
    }

    pub fn preimage_hash(&self, role: PeerRole) -> Digest20 {
        match role {
            PeerRole::Alice => self.h_a,
            PeerRole::Bob => self.h_b,
        }
    }

    /// Reward address of the tower serving `client`.
    pub fn tower_address(&self, client: PeerRole) -> Option<OutputLock> {
        let k = match client {
            PeerRole::Alice => self.tower_a_key,
            PeerRole::Bob => self.tower_b_key,
        }?;
        Some(OutputLock::ScriptHash(templates::single_key_script(&k)))
    }

    pub fn covenant_address(&self) -> OutputLock {
        OutputLock::ScriptHash(templates::covenant_script(&self.keyset))
    }

    pub fn shared_address(&self) -> OutputLock {
        self.covenant_address()
    }

    fn unilateral_lock(&self) -> OutputLock {
        OutputLock::ScriptHash(templates::unilateral_exit_script(&self.keyset, self.h_a, self.h_b))
    }

    pub fn has_wt_outputs(&self) -> bool {
        self.level >= PrivacyLevel::L2 || self.wt_outputs
    }

    /// Connector outputs placed on Setup after `Initial_Funds_out`.
    fn setup_connectors(&self) -> Vec<TxOut> {
        let e = self.epsilon;
        let cov = self.covenant_address();
        let mut v = Vec::new();
        match self.level {
            PrivacyLevel::L3 => v.push(TxOut { amount: 8 * e, lock: cov.clone() }),
            _ => v.push(TxOut { amount: 3 * e, lock: self.unilateral_lock() }),
        }
        v.push(TxOut { amount: 2 * e, lock: cov.clone() });
        v.push(TxOut { amount: 2 * e, lock: cov.clone() });
        match self.level {
            PrivacyLevel::L1 if self.wt_outputs => {
                v.push(TxOut { amount: 2 * e, lock: cov.clone() });
                v.push(TxOut { amount: 2 * e, lock: cov });
            }
            PrivacyLevel::L1 => {}
            PrivacyLevel::L2 => v.push(TxOut { amount: 5 * e, lock: cov }),
            PrivacyLevel::L3 => {}
        }
        v
    }

    /// Total value Setup moves into connectors.
    pub fn connector_total(&self) -> u64 {
        self.setup_connectors().iter().map(|o| o.amount).sum()
    }
}

/// Balances and sequence numbers of one channel state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub isn: u32,
    pub esn: u32,
    pub a_bal: u64,
    pub b_bal: u64,
    pub htlcs: Vec<Htlc>,
    /// Amount committed to fees out of the channel funds.
    #[serde(default)]
    pub fee_reserve: u64,
}

impl StateSnapshot {
    pub fn initial(a_bal: u64, b_bal: u64, esn: u32) -> StateSnapshot {
        StateSnapshot { isn: 0, esn, a_bal, b_bal, htlcs: Vec::new(), fee_reserve: 0 }
    }

    pub fn htlc_total(&self) -> u64 {
        self.htlcs.iter().map(|h| h.amount).sum()
    }

    pub fn balance(&self, role: PeerRole) -> u64 {
        match role {
            PeerRole::Alice => self.a_bal,
            PeerRole::Bob => self.b_bal,
        }
    }

    /// `A_BAL + B_BAL + Σ htlc + fee_reserve = I_BAL` and `esn ≥ isn`.
    pub fn check(&self, i_bal: u64) -> Result<(), TxGraphError> {
        let total = self.a_bal + self.b_bal + self.htlc_total() + self.fee_reserve;
        if total != i_bal {
            return Err(TxGraphError::Conservation { total, i_bal });
        }
        if self.esn < self.isn {
            return Err(TxGraphError::EsnBelowIsn { isn: self.isn, esn: self.esn });
        }
        Ok(())
    }
}

/// A transaction with empty witnesses plus the spending path of each input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub kind: TxKind,
    pub tx: Transaction,
    pub spends: Vec<SpendPath>,
}

impl Template {
    fn new(kind: TxKind, inputs: Vec<(TxIn, SpendPath)>, outputs: Vec<TxOut>) -> Template {
        let (ins, spends) = inputs.into_iter().unzip();
        Template { kind, tx: Transaction { inputs: ins, outputs, locktime: None }, spends }
    }

    pub fn txid(&self) -> Digest {
        self.tx.txid()
    }

    pub fn sighash(&self) -> Digest {
        self.tx.sighash()
    }

    pub fn outpoint(&self, index: u32) -> Outpoint {
        self.tx.outpoint(index)
    }

    /// Covenant path indices that must be presigned. FinalizeExit is signed
    /// for both Ready_out leaves so either can be used later.
    pub fn covenant_paths(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.spends.iter().filter_map(|s| s.covenant_path()).collect();
        if self.kind == TxKind::FinalizeExit {
            v.push(SpendPath::ReadyFast.covenant_path().expect("covenant path"));
        }
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Fills input `input`'s witness for `path`.
    pub fn set_witness(&mut self, input: usize, path: SpendPath, m: &SpendMaterial) -> Result<(), ScriptError> {
        self.tx.inputs[input].witness = crate::script::build_witness_for(path, m)?;
        self.spends[input] = path;
        Ok(())
    }
}

/// An owner's contribution to Setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundingInput {
    pub outpoint: Outpoint,
    pub amount: u64,
    pub owner: PeerRole,
}

/// Outpoints every later template hangs off.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchors {
    pub setup: Digest,
    pub funds: Outpoint,
    pub unilateral: Outpoint,
    pub bob_disputes: Outpoint,
    pub alice_disputes: Outpoint,
    pub wtb_disputes: Option<Outpoint>,
    pub wta_disputes: Option<Outpoint>,
    /// Level 2: WTDisputes txid. Level 3: StartExit txid.
    pub q: Option<Digest>,
    /// Setup outputs other than the channel funds, swept by a cooperative close.
    pub connectors: Vec<(Outpoint, u64)>,
}

impl Anchors {
    pub fn dispute_output(&self, punisher: PeerRole) -> Outpoint {
        match punisher {
            PeerRole::Bob => self.bob_disputes,
            PeerRole::Alice => self.alice_disputes,
        }
    }

    pub fn tower_dispute_output(&self, client: PeerRole) -> Option<Outpoint> {
        match client {
            PeerRole::Bob => self.wtb_disputes,
            PeerRole::Alice => self.wta_disputes,
        }
    }
}

/// Setup, spending both owners' funding. Any excess over the deposit and
/// half the connector cost goes back to its owner as change.
pub fn build_setup(params: &ChannelParams, state0: &StateSnapshot, funding: &[FundingInput]) -> Result<Template, TxGraphError> {
    params.validate()?;
    state0.check(params.i_bal)?;
    let connectors = params.connector_total();
    let share_a = connectors - connectors / 2;
    let share_b = connectors / 2;
    let mut outputs = vec![TxOut { amount: params.i_bal, lock: params.covenant_address() }];
    outputs.extend(params.setup_connectors());
    for (role, deposit, share) in [(PeerRole::Alice, state0.a_bal, share_a), (PeerRole::Bob, state0.b_bal, share_b)] {
        let available: u64 = funding.iter().filter(|f| f.owner == role).map(|f| f.amount).sum();
        let needed = deposit + share;
        if available < needed {
            return Err(TxGraphError::InsufficientFunding { role, needed, available });
        }
        if available > needed {
            outputs.push(TxOut { amount: available - needed, lock: params.address(role) });
        }
    }
    let inputs = funding.iter().map(|f| (TxIn::new(f.outpoint), SpendPath::SingleKey)).collect();
    Ok(Template::new(TxKind::Setup, inputs, outputs))
}

/// Level 2 WTDisputes or level 3 StartExit for a given Setup txid.
pub fn build_wt_structure(params: &ChannelParams, setup: Digest) -> Result<Template, TxGraphError> {
    let e = params.epsilon;
    let cov = params.covenant_address();
    let nonce = params.wt_nonce.ok_or(TxGraphError::WrongLevel)?;
    let op_return = TxOut { amount: 0, lock: OutputLock::op_return(nonce.0.to_vec()) };
    let wt = |amount| TxOut { amount, lock: cov.clone() };
    match params.level {
        PrivacyLevel::L1 => Err(TxGraphError::WrongLevel),
        PrivacyLevel::L2 => Ok(Template::new(
            TxKind::WtDisputes,
            vec![(TxIn::new(Outpoint::new(setup, 4)), SpendPath::Covenant)],
            vec![wt(2 * e), wt(2 * e), op_return],
        )),
        PrivacyLevel::L3 => Ok(Template::new(
            TxKind::StartExit,
            vec![(TxIn::new(Outpoint::new(setup, 1)), SpendPath::Covenant)],
            vec![TxOut { amount: 3 * e, lock: params.unilateral_lock() }, wt(2 * e), wt(2 * e), op_return],
        )),
    }
}

/// Resolves the fixed outpoints from a built Setup.
pub fn anchors(params: &ChannelParams, setup: &Transaction) -> Result<Anchors, TxGraphError> {
    let sid = setup.txid();
    let n_conn = params.setup_connectors().len();
    let connectors = (1..=n_conn as u32).map(|i| (Outpoint::new(sid, i), setup.outputs[i as usize].amount)).collect();
    let mut a = Anchors {
        setup: sid,
        funds: Outpoint::new(sid, 0),
        unilateral: Outpoint::new(sid, 1),
        bob_disputes: Outpoint::new(sid, 2),
        alice_disputes: Outpoint::new(sid, 3),
        wtb_disputes: None,
        wta_disputes: None,
        q: None,
        connectors,
    };
    match params.level {
        PrivacyLevel::L1 => {
            if params.wt_outputs {
                a.wtb_disputes = Some(Outpoint::new(sid, 4));
                a.wta_disputes = Some(Outpoint::new(sid, 5));
            }
        }
        PrivacyLevel::L2 => {
            let q = build_wt_structure(params, sid)?.txid();
            a.q = Some(q);
            a.wtb_disputes = Some(Outpoint::new(q, 0));
            a.wta_disputes = Some(Outpoint::new(q, 1));
        }
        PrivacyLevel::L3 => {
            let q = build_wt_structure(params, sid)?.txid();
            a.q = Some(q);
            a.unilateral = Outpoint::new(q, 0);
            a.wtb_disputes = Some(Outpoint::new(q, 1));
            a.wta_disputes = Some(Outpoint::new(q, 2));
        }
    }
    Ok(a)
}

/// Unilateral exit transactions of one state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitSet {
    pub commit_exit: Template,
    pub assert_exit: Template,
    pub finalize_exit: Template,
    pub expire_alice: Template,
    pub expire_bob: Template,
}

impl ExitSet {
    pub fn templates(&self) -> [&Template; 5] {
        [&self.commit_exit, &self.assert_exit, &self.finalize_exit, &self.expire_alice, &self.expire_bob]
    }

    pub fn templates_mut(&mut self) -> [&mut Template; 5] {
        [
            &mut self.commit_exit,
            &mut self.assert_exit,
            &mut self.finalize_exit,
            &mut self.expire_alice,
            &mut self.expire_bob,
        ]
    }

    pub fn expire(&self, staller: PeerRole) -> &Template {
        match staller {
            PeerRole::Alice => &self.expire_alice,
            PeerRole::Bob => &self.expire_bob,
        }
    }
}

/// Lock of `CommitExit_out` for a given esn.
pub fn commit_exit_lock(params: &ChannelParams, esn: u32) -> OutputLock {
    let h_e = if params.level == PrivacyLevel::L2 { params.h_e } else { None };
    lock_of(templates::commit_exit_leaves(
        &params.keyset,
        &params.k_a,
        &params.k_b,
        esn,
        params.timeout,
        params.h_a,
        params.h_b,
        h_e,
    ))
    .expect("three leaves")
}

pub fn ready_lock(params: &ChannelParams) -> OutputLock {
    lock_of(templates::ready_leaves(&params.keyset, params.timeout, params.h_a, params.h_b)).expect("two leaves")
}

pub fn htlc_lock(params: &ChannelParams, h: &Htlc) -> OutputLock {
    let sender = params.key(h.direction.sender());
    let receiver = params.key(h.direction.receiver());
    lock_of(templates::htlc_leaves(h.payment_hash, h.expiry, &receiver, &sender)).expect("two leaves")
}

/// `l3_payload` is the OP_RETURN body a level-3 CommitExit carries
/// (see [`l3_commit_payload`]); it must be absent at other levels.
pub fn build_exit_set(
    params: &ChannelParams,
    anchors: &Anchors,
    state: &StateSnapshot,
    l3_payload: Option<&[u8]>,
) -> Result<ExitSet, TxGraphError> {
    state.check(params.i_bal)?;
    let e = params.epsilon;
    let mut ce_outputs = vec![TxOut { amount: 2 * e, lock: commit_exit_lock(params, state.esn) }];
    match (params.level, l3_payload) {
        (PrivacyLevel::L3, Some(p)) => ce_outputs.push(TxOut { amount: 0, lock: OutputLock::op_return(p.to_vec()) }),
        (PrivacyLevel::L3, None) => return Err(TxGraphError::InvalidParams("level 3 CommitExit needs its tower payload")),
        (_, Some(_)) => return Err(TxGraphError::InvalidParams("tower payload only exists at level 3")),
        (_, None) => {}
    }
    let commit_exit = Template::new(
        TxKind::CommitExit,
        vec![(TxIn::new(anchors.unilateral), SpendPath::UnilateralExit { bob_branch: false })],
        ce_outputs,
    );
    let with_tower_key = params.level == PrivacyLevel::L2;
    let assert_exit = Template::new(
        TxKind::AssertExitState,
        vec![(TxIn::new(commit_exit.outpoint(0)), SpendPath::CommitExitAssert { bob_branch: false, with_tower_key })],
        vec![TxOut { amount: e, lock: ready_lock(params) }, TxOut { amount: e, lock: params.shared_address() }],
    );
    let mut fin_out = Vec::new();
    for role in [PeerRole::Alice, PeerRole::Bob] {
        let amount = state.balance(role);
        if amount > 0 {
            fin_out.push(TxOut { amount, lock: params.address(role) });
        }
    }
    for h in &state.htlcs {
        fin_out.push(TxOut { amount: h.amount, lock: htlc_lock(params, h) });
    }
    let finalize_exit = Template::new(
        TxKind::FinalizeExit,
        vec![(TxIn::new(anchors.funds), SpendPath::Covenant), (TxIn::new(assert_exit.outpoint(0)), SpendPath::ReadyFinalize)],
        fin_out,
    );
    let expire = |kind, staller: PeerRole| {
        Template::new(
            kind,
            vec![
                (TxIn::floating(commit_exit.outpoint(0)), SpendPath::CommitExitTimeout { bob_branch: staller == PeerRole::Bob }),
                (TxIn::new(anchors.funds), SpendPath::Covenant),
            ],
            vec![TxOut { amount: params.i_bal, lock: params.address(staller.other()) }],
        )
    };
    Ok(ExitSet {
        expire_alice: expire(TxKind::ExpireAliceExit, PeerRole::Alice),
        expire_bob: expire(TxKind::ExpireBobExit, PeerRole::Bob),
        commit_exit,
        assert_exit,
        finalize_exit,
    })
}

/// A CommitPunish transaction and the Punish transaction spending it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PunishPair {
    pub commit: Template,
    pub punish: Template,
}

impl PunishPair {
    /// Value below which the cheater's signed esn is punishable.
    pub fn threshold(&self) -> Option<u32> {
        let out = self.commit.tx.outputs.first()?;
        match &out.lock {
            OutputLock::ScriptHash(s) => s.ops().iter().find_map(|op| match op {
                crate::script::ScriptOp::PushInt(v) => Some(*v),
                _ => None,
            }),
            _ => None,
        }
    }
}

/// Everything needed to rebuild a punishment pair; a level-3 tower keeps
/// the static part of this from registration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PunishSpec {
    pub keyset: CovenantKeySet,
    pub cheater: PeerRole,
    pub cheater_key: OtsPublicKey,
    pub dispute: Outpoint,
    pub funds: Outpoint,
    pub i_bal: u64,
    pub epsilon: u64,
    pub threshold: u32,
    pub beneficiary: OutputLock,
    pub reward: Option<(u64, OutputLock)>,
    pub tower: bool,
}

pub fn build_punish_pair(spec: &PunishSpec) -> PunishPair {
    let (ck, pk) = match (spec.cheater, spec.tower) {
        (PeerRole::Alice, false) => (TxKind::CommitPunishAlice, TxKind::PunishAlice),
        (PeerRole::Bob, false) => (TxKind::CommitPunishBob, TxKind::PunishBob),
        (PeerRole::Alice, true) => (TxKind::WtbCommitPunishAlice, TxKind::WtbPunishAlice),
        (PeerRole::Bob, true) => (TxKind::WtaCommitPunishBob, TxKind::WtaPunishBob),
    };
    let lock = OutputLock::ScriptHash(templates::punish_script(&spec.keyset, &spec.cheater_key, spec.threshold));
    let commit = Template::new(
        ck,
        vec![(TxIn::new(spec.dispute), SpendPath::Covenant)],
        vec![TxOut { amount: spec.epsilon, lock }],
    );
    let mut outputs = vec![TxOut { amount: spec.i_bal, lock: spec.beneficiary.clone() }];
    if let Some((amount, lock)) = &spec.reward {
        if *amount > 0 {
            outputs.push(TxOut { amount: *amount, lock: lock.clone() });
        }
    }
    let punish = Template::new(
        pk,
        vec![(TxIn::new(spec.funds), SpendPath::Covenant), (TxIn::new(commit.outpoint(0)), SpendPath::Punish)],
        outputs,
    );
    PunishPair { commit, punish }
}

/// Punishment pair used by `punisher` (or, with `tower`, by the punisher's
/// tower) against the other owner.
pub fn punish_spec(
    params: &ChannelParams,
    anchors: &Anchors,
    punisher: PeerRole,
    threshold: u32,
    tower: bool,
) -> Result<PunishSpec, TxGraphError> {
    let cheater = punisher.other();
    let dispute = if tower {
        anchors.tower_dispute_output(punisher).ok_or(TxGraphError::InvalidParams("no tower dispute outputs"))?
    } else {
        anchors.dispute_output(punisher)
    };
    let reward = if tower { params.tower_address(punisher).map(|l| (params.tower_reward, l)) } else { None };
    Ok(PunishSpec {
        keyset: params.keyset,
        cheater,
        cheater_key: params.ots_key(cheater).clone(),
        dispute,
        funds: anchors.funds,
        i_bal: params.i_bal,
        epsilon: params.epsilon,
        threshold,
        beneficiary: params.address(punisher),
        reward,
        tower,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PunishSet {
    /// Used by Bob against Alice.
    pub punish_alice: PunishPair,
    /// Used by Alice against Bob.
    pub punish_bob: PunishPair,
    /// Bob's tower against Alice (levels 1 with tower outputs, and 2).
    pub wtb_punish_alice: Option<PunishPair>,
    pub wta_punish_bob: Option<PunishPair>,
}

impl PunishSet {
    pub fn against(&self, cheater: PeerRole) -> &PunishPair {
        match cheater {
            PeerRole::Alice => &self.punish_alice,
            PeerRole::Bob => &self.punish_bob,
        }
    }

    pub fn tower_against(&self, cheater: PeerRole) -> Option<&PunishPair> {
        match cheater {
            PeerRole::Alice => self.wtb_punish_alice.as_ref(),
            PeerRole::Bob => self.wta_punish_bob.as_ref(),
        }
    }

    pub fn pairs(&self) -> Vec<&PunishPair> {
        let mut v = vec![&self.punish_alice, &self.punish_bob];
        v.extend(self.wtb_punish_alice.iter());
        v.extend(self.wta_punish_bob.iter());
        v
    }

    pub fn pairs_mut(&mut self) -> Vec<&mut PunishPair> {
        let mut v = vec![&mut self.punish_alice, &mut self.punish_bob];
        v.extend(self.wtb_punish_alice.iter_mut());
        v.extend(self.wta_punish_bob.iter_mut());
        v
    }
}

/// Punishment transactions created at state `state.isn`; any assert of an
/// esn below `state.esn` can be answered with them. Level-3 tower pairs
/// are built separately with [`l3_tower_pair`].
pub fn build_punish_set(params: &ChannelParams, anchors: &Anchors, state: &StateSnapshot) -> Result<PunishSet, TxGraphError> {
    if state.isn == 0 {
        return Err(TxGraphError::StateZero);
    }
    let pair = |punisher, tower| punish_spec(params, anchors, punisher, state.esn, tower).map(|s| build_punish_pair(&s));
    let towers = params.has_wt_outputs() && params.level != PrivacyLevel::L3;
    Ok(PunishSet {
        punish_alice: pair(PeerRole::Bob, false)?,
        punish_bob: pair(PeerRole::Alice, false)?,
        wtb_punish_alice: if towers { Some(pair(PeerRole::Bob, true)?) } else { None },
        wta_punish_bob: if towers { Some(pair(PeerRole::Alice, true)?) } else { None },
    })
}

/// Tower pair whose signatures travel encrypted inside CommitExit(i) at
/// level 3. It punishes asserts up to and including `esn` itself, which is
/// safe because its key is only revealed once state i is revoked.
pub fn l3_tower_pair(params: &ChannelParams, anchors: &Anchors, client: PeerRole, esn: u32) -> Result<PunishPair, TxGraphError> {
    if params.level != PrivacyLevel::L3 {
        return Err(TxGraphError::WrongLevel);
    }
    let threshold = esn.checked_add(1).ok_or(TxGraphError::InvalidParams("esn at maximum"))?;
    Ok(build_punish_pair(&punish_spec(params, anchors, client, threshold, true)?))
}

/// OP_RETURN body of a level-3 CommitExit: the isn, then the packet for
/// Alice's tower, then the packet for Bob's tower.
pub fn l3_commit_payload(isn: u32, for_alice_tower: &CipherPacket, for_bob_tower: &CipherPacket) -> Vec<u8> {
    let mut v = isn.to_le_bytes().to_vec();
    v.extend(for_alice_tower.to_bytes());
    v.extend(for_bob_tower.to_bytes());
    v
}

pub fn parse_l3_payload(data: &[u8]) -> Option<(u32, CipherPacket, CipherPacket)> {
    if data.len() != 4 + 2 * L3_PACKET_LEN {
        return None;
    }
    let isn = u32::from_le_bytes(data[..4].try_into().ok()?);
    let a = CipherPacket::from_bytes(&data[4..4 + L3_PACKET_LEN]).ok()?;
    let b = CipherPacket::from_bytes(&data[4 + L3_PACKET_LEN..]).ok()?;
    Some((isn, a, b))
}

/// Spends the channel funds and every Setup connector, paying each owner
/// its balance plus half the swept connectors minus half the fee. An owner
/// left with nothing gets no output and the other bears the whole fee.
pub fn build_cooperative_close(
    params: &ChannelParams,
    anchors: &Anchors,
    state: &StateSnapshot,
    fee: u64,
) -> Result<Template, TxGraphError> {
    state.check(params.i_bal)?;
    if !state.htlcs.is_empty() {
        return Err(TxGraphError::InvalidParams("close with open HTLCs"));
    }
    let sweep: u64 = anchors.connectors.iter().map(|(_, a)| a).sum();
    let mut inputs = vec![(TxIn::new(anchors.funds), SpendPath::Covenant)];
    for (i, (op, _)) in anchors.connectors.iter().enumerate() {
        let path = if i == 0 && params.level != PrivacyLevel::L3 {
            SpendPath::UnilateralExit { bob_branch: false }
        } else {
            SpendPath::Covenant
        };
        inputs.push((TxIn::new(*op), path));
    }
    let live: Vec<PeerRole> = [PeerRole::Alice, PeerRole::Bob].into_iter().filter(|r| state.balance(*r) > 0).collect();
    let mut outputs = Vec::new();
    match live.as_slice() {
        [only] => {
            let amount = (state.balance(*only) + sweep).checked_sub(fee).ok_or(TxGraphError::CloseFee { fee })?;
            outputs.push(TxOut { amount, lock: params.address(*only) });
        }
        [_, _] => {
            let shares = [(PeerRole::Alice, sweep - sweep / 2, fee - fee / 2), (PeerRole::Bob, sweep / 2, fee / 2)];
            for (role, s, f) in shares {
                let amount = (state.balance(role) + s).checked_sub(f).ok_or(TxGraphError::CloseFee { fee })?;
                outputs.push(TxOut { amount, lock: params.address(role) });
            }
        }
        _ => return Err(TxGraphError::CloseFee { fee }),
    }
    Ok(Template::new(TxKind::CooperativeClose, inputs, outputs))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::crypto::{OtsKeyPair, OtsParams, Preimage, SigningKey};

    pub(crate) fn params(level: PrivacyLevel) -> ChannelParams {
        let a = SigningKey::from_seed(b"alice");
        let b = SigningKey::from_seed(b"bob");
        ChannelParams {
            i_bal: 100_000,
            epsilon: 1_000,
            timeout: 6,
            alice_key: a.public(),
            bob_key: b.public(),
            h_a: Preimage([0xa; 32]).hash(),
            h_b: Preimage([0xb; 32]).hash(),
            k_a: OtsKeyPair::generate(OtsParams::default(), &[1; 32]).unwrap().public().clone(),
            k_b: OtsKeyPair::generate(OtsParams::default(), &[2; 32]).unwrap().public().clone(),
            keyset: CovenantKeySet { alice: a.public(), bob: b.public() },
            level,
            wt_outputs: true,
            h_e: Some(Preimage([0xe; 32]).hash()),
            wt_nonce: Some(Digest([7; 32])),
            tower_reward: 500,
            tower_a_key: Some(SigningKey::from_seed(b"wta").public()),
            tower_b_key: Some(SigningKey::from_seed(b"wtb").public()),
            chain_len: 4096,
        }
    }

    fn funding(a: u64, b: u64) -> Vec<FundingInput> {
        vec![
            FundingInput { outpoint: Outpoint::new(Digest([1; 32]), 0), amount: a, owner: PeerRole::Alice },
            FundingInput { outpoint: Outpoint::new(Digest([2; 32]), 0), amount: b, owner: PeerRole::Bob },
        ]
    }

    #[test]
    fn setup_amounts_follow_epsilon() {
        let p = params(PrivacyLevel::L1);
        let s0 = StateSnapshot::initial(50_000, 50_000, 1);
        let setup = build_setup(&p, &s0, &funding(55_500, 55_500)).unwrap();
        let amounts: Vec<u64> = setup.tx.outputs.iter().map(|o| o.amount).collect();
        assert_eq!(amounts, vec![100_000, 3_000, 2_000, 2_000, 2_000, 2_000]);
    }

    #[test]
    fn funding_shortfall() {
        let p = params(PrivacyLevel::L1);
        let s0 = StateSnapshot::initial(50_000, 50_000, 1);
        let err = build_setup(&p, &s0, &funding(55_499, 55_500)).unwrap_err();
        assert_eq!(err, TxGraphError::InsufficientFunding { role: PeerRole::Alice, needed: 55_500, available: 55_499 });
        let with_change = build_setup(&p, &s0, &funding(56_000, 55_500)).unwrap();
        assert_eq!(with_change.tx.outputs.last().unwrap().amount, 500);
    }

    #[test]
    fn level2_moves_tower_outputs_to_wtdisputes() {
        let p = params(PrivacyLevel::L2);
        let s0 = StateSnapshot::initial(50_000, 50_000, 1);
        let setup = build_setup(&p, &s0, &funding(56_000, 56_000)).unwrap();
        assert_eq!(setup.tx.outputs.len(), 5);
        let a = anchors(&p, &setup.tx).unwrap();
        let wt = build_wt_structure(&p, setup.txid()).unwrap();
        assert_eq!(a.q, Some(wt.txid()));
        assert_eq!(a.wta_disputes.unwrap().txid, wt.txid());
        let mut other = p.clone();
        other.wt_nonce = Some(Digest([8; 32]));
        assert_ne!(build_wt_structure(&other, setup.txid()).unwrap().txid(), wt.txid());
        assert_eq!(build_wt_structure(&params(PrivacyLevel::L1), setup.txid()), Err(TxGraphError::WrongLevel));
    }

    #[test]
    fn exit_set_balances_and_expire() {
        let p = params(PrivacyLevel::L1);
        let s0 = StateSnapshot::initial(50_000, 50_000, 1);
        let setup = build_setup(&p, &s0, &funding(55_500, 55_500)).unwrap();
        let a = anchors(&p, &setup.tx).unwrap();
        let s = StateSnapshot { isn: 100, esn: 100, a_bal: 60_000, b_bal: 40_000, htlcs: vec![], fee_reserve: 0 };
        let set = build_exit_set(&p, &a, &s, None).unwrap();
        let fin: Vec<u64> = set.finalize_exit.tx.outputs.iter().map(|o| o.amount).collect();
        assert_eq!(fin, vec![60_000, 40_000]);
        assert_eq!(set.expire_alice.tx.outputs[0].amount, p.i_bal);
        assert_eq!(set.expire_alice.tx.outputs[0].lock, p.address(PeerRole::Bob));
        assert_eq!(set.expire_bob.tx.outputs[0].lock, p.address(PeerRole::Alice));
        assert_eq!(set.finalize_exit.covenant_paths(), vec![0, 1, 2]);
        // identical inputs rebuild identical bytes
        assert_eq!(build_exit_set(&p, &a, &s, None).unwrap(), set);
    }

    #[test]
    fn punish_set_state_zero_and_threshold() {
        let p = params(PrivacyLevel::L1);
        let s0 = StateSnapshot::initial(50_000, 50_000, 1);
        let setup = build_setup(&p, &s0, &funding(55_500, 55_500)).unwrap();
        let a = anchors(&p, &setup.tx).unwrap();
        assert_eq!(build_punish_set(&p, &a, &s0), Err(TxGraphError::StateZero));
        let s = StateSnapshot { isn: 100, esn: 100, ..s0 };
        let set = build_punish_set(&p, &a, &s).unwrap();
        assert_eq!(set.punish_alice.threshold(), Some(100));
        assert_eq!(set.punish_alice.punish.tx.outputs[0].amount, p.i_bal);
        assert_eq!(set.punish_alice.punish.tx.outputs[0].lock, p.address(PeerRole::Bob));
        let wt = set.wtb_punish_alice.as_ref().unwrap();
        assert_eq!(wt.punish.tx.outputs[1].amount, p.tower_reward);
        assert_eq!(wt.commit.tx.inputs[0].prevout, a.wtb_disputes.unwrap());
    }

    #[test]
    fn cooperative_close_splits() {
        let p = params(PrivacyLevel::L1);
        let s0 = StateSnapshot::initial(50_000, 50_000, 1);
        let setup = build_setup(&p, &s0, &funding(55_500, 55_500)).unwrap();
        let a = anchors(&p, &setup.tx).unwrap();
        let close = build_cooperative_close(&p, &a, &s0, 400).unwrap();
        let out: Vec<u64> = close.tx.outputs.iter().map(|o| o.amount).collect();
        assert_eq!(out, vec![50_000 - 200 + 5_500, 50_000 - 200 + 5_500]);
        let lopsided = StateSnapshot::initial(100_000, 0, 1);
        let close = build_cooperative_close(&p, &a, &lopsided, 400).unwrap();
        assert_eq!(close.tx.outputs.len(), 1);
        assert_eq!(close.tx.outputs[0].amount, 100_000 + 11_000 - 400);
    }

    #[test]
    fn l3_payload_roundtrip() {
        let k = Digest([3; 32]);
        let pa = crate::crypto::encrypt(&k, &[1; L3_SIGS_LEN], [1; IV_LEN]);
        let pb = crate::crypto::encrypt(&k, &[2; L3_SIGS_LEN], [2; IV_LEN]);
        let body = l3_commit_payload(73, &pa, &pb);
        assert_eq!(body.len(), 4 + 2 * L3_PACKET_LEN);
        assert_eq!(parse_l3_payload(&body), Some((73, pa, pb)));
        assert_eq!(L3_SIGS_LEN, 130);
    }
}
