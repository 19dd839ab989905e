use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::message::{ChannelTerms, Envelope, OffchainMessage, PeerInfo, SetupOffer, TemplatePartial, UpdateOp};
use super::observe::{assert_at, commit_exit_at};
use super::sequence::{ReportSchedule, SequenceManager, DEFAULT_D};
use super::store::{complete, PunishStore, SigBook, SignedPair};
use super::{ChannelError, PeerRole};
use crate::chain::{Chain, Outpoint, Transaction};
use crate::crypto::{
    decrypt, encrypt, tagged_hash, CipherPacket, CovenantSignature, Digest, HashChain, KeyRegistry, OtsKeyPair,
    OtsParams, Preimage, PublicKeyId, SigningKey, COVENANT_SIG_LEN,
};
use crate::htlc;
use crate::script::{OutputLock, SpendMaterial, SpendPath};
use crate::txgraph::{
    anchors, build_cooperative_close, build_exit_set, build_punish_set, build_setup, build_wt_structure,
    l3_commit_payload, l3_tower_pair, Anchors, ChannelParams, ExitSet, FundingInput, PrivacyLevel, PunishPair,
    PunishSet, StateSnapshot, Template, TxKind,
};
use crate::watchtower::{encode_l3_key, pad_l2, L2Payload, L3Registration, TowerMessage, TowerMsgKind};

pub const DEFAULT_STEP_TIMEOUT: u64 = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub role: PeerRole,
    pub seed: u64,
    pub deposit: u64,
    pub epsilon: u64,
    pub timeout: u32,
    pub level: PrivacyLevel,
    pub wt_outputs: bool,
    pub tower_reward: u64,
    pub tower_key: Option<PublicKeyId>,
    pub step_timeout: u64,
    pub chain_len: u32,
    pub schedule: ReportSchedule,
    pub d_max: u32,
    pub ots_params: OtsParams,
    /// Keep every past signed state (only cheaters need this).
    pub keep_history: bool,
}

impl EngineConfig {
    pub fn new(role: PeerRole, seed: u64, deposit: u64) -> EngineConfig {
        EngineConfig {
            role,
            seed,
            deposit,
            epsilon: 1_000,
            timeout: 6,
            level: PrivacyLevel::L1,
            wt_outputs: true,
            tower_reward: 0,
            tower_key: None,
            step_timeout: DEFAULT_STEP_TIMEOUT,
            chain_len: 4096,
            schedule: ReportSchedule::All,
            d_max: DEFAULT_D,
            ots_params: OtsParams::default(),
            keep_history: false,
        }
    }

    fn terms(&self) -> ChannelTerms {
        ChannelTerms {
            epsilon: self.epsilon,
            timeout: self.timeout,
            level: self.level,
            wt_outputs: self.wt_outputs,
            tower_reward: self.tower_reward,
            chain_len: self.chain_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStage {
    Committed,
    Asserted,
    Finalizing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum ProtocolPhase {
    Init,
    SettingUp,
    Open { isn: u32 },
    Updating { from: u32, step: u8 },
    CoopClosing,
    UnilateralExiting { stage: ExitStage },
    Disputing,
    TimedOutEnforcing,
    Closed,
    Aborted,
}

/// How the channel funds were finally spent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub txid: Digest,
    pub kind: Option<TxKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    Phase { to: ProtocolPhase },
    Sent { msg: &'static str, isn: u32, step: u8 },
    Received { msg: &'static str, isn: u32, step: u8 },
    Dropped { msg: &'static str, isn: u32, step: u8 },
    Published { kind: TxKind, txid: Digest },
    Rejected { kind: TxKind, reason: String },
    Punishing { asserted: u32, threshold: u32 },
    Abort { reason: String },
    Tower { kind: TowerMsgKind },
    Resolved { txid: Digest, kind: Option<TxKind> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EngineRecord {
    pub tick: u64,
    pub role: PeerRole,
    #[serde(flatten)]
    pub event: EngineEvent,
}

/// Applies update operations to a snapshot. Pays and HTLC changes keep the
/// conservation invariant by construction.
pub fn apply_ops(state: &StateSnapshot, ops: &[UpdateOp], height: u32) -> Result<StateSnapshot, ChannelError> {
    let mut s = state.clone();
    for op in ops {
        s = match op {
            UpdateOp::Pay { from, amount } => {
                let mut n = s.clone();
                let (src, dst) = match from {
                    PeerRole::Alice => (&mut n.a_bal, &mut n.b_bal),
                    PeerRole::Bob => (&mut n.b_bal, &mut n.a_bal),
                };
                if *src < *amount {
                    return Err(htlc::HtlcError::InsufficientBalance { available: *src, requested: *amount }.into());
                }
                *src -= amount;
                *dst += amount;
                n
            }
            UpdateOp::AddHtlc { htlc } => htlc::add_htlc(&s, htlc.clone(), height)?,
            UpdateOp::SettleHtlc { id, preimage } => htlc::settle_htlc(&s, *id, preimage)?,
            UpdateOp::FailHtlc { id } => htlc::fail_htlc(&s, *id)?,
        };
    }
    Ok(s)
}

/// A state's templates and whatever aggregated signatures exist for them.
#[derive(Clone, Debug)]
struct Built {
    snapshot: StateSnapshot,
    exit: ExitSet,
    punish: Option<PunishSet>,
    sigs: SigBook,
}

impl Built {
    fn exit_complete(&self) -> bool {
        self.sigs.covers_all(&[&self.exit.commit_exit, &self.exit.assert_exit, &self.exit.finalize_exit])
    }
}

/// Level-3 tower pairs of the state being built.
#[derive(Clone, Debug)]
struct L3Round {
    /// Punishes this owner; this owner aggregates and encrypts it.
    against_me: PunishPair,
    against_peer: PunishPair,
    my_packet: Option<CipherPacket>,
    peer_packet: Option<CipherPacket>,
}

#[derive(Clone, Debug)]
struct Pending {
    proposer: bool,
    next: StateSnapshot,
    built: Option<Built>,
    l3: Option<L3Round>,
    step: u8,
    revoked: bool,
}

#[derive(Clone, Debug)]
struct SetupRound {
    alice: Option<PeerInfo>,
    bob: Option<PeerInfo>,
    esn0: u32,
    p_e: Option<Preimage>,
    nonce: Option<Digest>,
    setup: Option<Template>,
    l3: Option<L3Round>,
    built: Option<Built>,
    published: bool,
}

#[derive(Clone, Debug)]
struct OwnExit {
    built: Built,
    commit_txid: Digest,
    assert: bool,
}

pub struct PeerEngine {
    cfg: EngineConfig,
    key: SigningKey,
    ots: OtsKeyPair,
    preimage: Preimage,
    registry: KeyRegistry,
    rng: ChaCha8Rng,
    funding: Vec<FundingInput>,
    phase: ProtocolPhase,
    seq: SequenceManager,
    channel: Digest,
    round: Option<SetupRound>,
    params: Option<ChannelParams>,
    anchors: Option<Anchors>,
    setup_txid: Option<Digest>,
    wt_structure: Option<Template>,
    static_sigs: SigBook,
    current: Option<Built>,
    pending: Option<Pending>,
    store: PunishStore,
    history: BTreeMap<u32, Built>,
    my_chain: Option<HashChain>,
    tower_key: Option<(u32, Digest)>,
    /// Pair against the peer plus its packet in the current CommitExit,
    /// checked once the peer reveals the key.
    tower_check: Option<(PunishPair, CipherPacket)>,
    p_e: Option<Preimage>,
    peer_preimage: Option<Preimage>,
    htlc_preimages: BTreeMap<crate::crypto::Digest20, Preimage>,
    outbox: VecDeque<Envelope>,
    tower_out: Vec<TowerMessage>,
    log: Vec<EngineRecord>,
    now: u64,
    waiting_since: Option<u64>,
    halt_after: Option<u8>,
    frozen: bool,
    own_exit: Option<OwnExit>,
    submitted: BTreeSet<Digest>,
    close_fee: Option<u64>,
    close: Option<(Template, SigBook)>,
    resolution: Option<Resolution>,
}

fn role_salt(role: PeerRole) -> u64 {
    match role {
        PeerRole::Alice => 0xa11c_e000_0000_0001,
        PeerRole::Bob => 0xb0b0_0000_0000_0002,
    }
}

impl PeerEngine {
    pub fn new(cfg: EngineConfig, registry: &KeyRegistry) -> Result<PeerEngine, ChannelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ role_salt(cfg.role));
        let key = SigningKey::from_seed(&rng.gen::<[u8; 32]>());
        registry.register(&key);
        let ots = OtsKeyPair::generate(cfg.ots_params, &rng.gen())?;
        let preimage = Preimage(rng.gen());
        let seq = SequenceManager::new(cfg.schedule.clone(), cfg.d_max, cfg.ots_params.value_bits);
        Ok(PeerEngine {
            key,
            ots,
            preimage,
            registry: registry.clone(),
            rng,
            funding: Vec::new(),
            phase: ProtocolPhase::Init,
            seq,
            channel: Digest::ZERO,
            round: None,
            params: None,
            anchors: None,
            setup_txid: None,
            wt_structure: None,
            static_sigs: SigBook::default(),
            current: None,
            pending: None,
            store: PunishStore::default(),
            history: BTreeMap::new(),
            my_chain: None,
            tower_key: None,
            tower_check: None,
            p_e: None,
            peer_preimage: None,
            htlc_preimages: BTreeMap::new(),
            outbox: VecDeque::new(),
            tower_out: Vec::new(),
            log: Vec::new(),
            now: 0,
            waiting_since: None,
            halt_after: None,
            frozen: false,
            own_exit: None,
            submitted: BTreeSet::new(),
            close_fee: None,
            close: None,
            resolution: None,
            cfg,
        })
    }

    // ---- accessors -------------------------------------------------------

    pub fn role(&self) -> PeerRole {
        self.cfg.role
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn public_key(&self) -> PublicKeyId {
        self.key.public()
    }

    /// Single-key address of this owner.
    pub fn address(&self) -> OutputLock {
        OutputLock::ScriptHash(crate::script::templates::single_key_script(&self.key.public()))
    }

    pub fn phase(&self) -> &ProtocolPhase {
        &self.phase
    }

    pub fn params(&self) -> Option<&ChannelParams> {
        self.params.as_ref()
    }

    pub fn anchors(&self) -> Option<&Anchors> {
        self.anchors.as_ref()
    }

    pub fn setup_txid(&self) -> Option<Digest> {
        self.setup_txid
    }

    pub fn current_state(&self) -> Option<&StateSnapshot> {
        self.current.as_ref().map(|b| &b.snapshot)
    }

    pub fn pending_state(&self) -> Option<&StateSnapshot> {
        self.pending.as_ref().map(|p| &p.next)
    }

    pub fn pending_step(&self) -> Option<u8> {
        self.pending.as_ref().map(|p| p.step)
    }

    pub fn sequence(&self) -> &SequenceManager {
        &self.seq
    }

    pub fn punish_store(&self) -> &PunishStore {
        &self.store
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn log(&self) -> &[EngineRecord] {
        &self.log
    }

    pub fn resolution(&self) -> Option<&Resolution> {
        self.resolution.as_ref()
    }

    pub fn is_idle(&self) -> bool {
        matches!(self.phase, ProtocolPhase::Open { .. }) && self.pending.is_none()
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.phase, ProtocolPhase::Closed)
    }

    /// Txids of the exit set of the current state, for observers.
    pub fn current_exit_txids(&self) -> Option<Vec<(TxKind, Digest)>> {
        let b = self.current.as_ref()?;
        Some(b.exit.templates().iter().map(|t| (t.kind, t.txid())).collect())
    }

    /// Template of a given kind in the current or pending state.
    pub fn template(&self, kind: TxKind, pending: bool) -> Option<Template> {
        let b = if pending { self.pending.as_ref()?.built.as_ref()? } else { self.current.as_ref()? };
        b.exit
            .templates()
            .into_iter()
            .chain(b.punish.iter().flat_map(|p| p.pairs().into_iter().flat_map(|pp| [&pp.commit, &pp.punish])))
            .find(|t| t.kind == kind)
            .cloned()
    }

    /// Level 3: the peer's tower pair of the current state with the packet
    /// carrying its signatures.
    pub fn l3_tower_check(&self) -> Option<(&PunishPair, &CipherPacket)> {
        self.tower_check.as_ref().map(|(p, c)| (p, c))
    }

    /// Level 3: the latest chain key the peer revealed, with its index.
    pub fn peer_chain_key(&self) -> Option<(u32, Digest)> {
        self.tower_key
    }

    pub fn learn_preimage(&mut self, p: Preimage) {
        self.htlc_preimages.insert(p.hash(), p);
    }

    pub fn drain_outbox(&mut self) -> Vec<Envelope> {
        self.outbox.drain(..).collect()
    }

    pub fn drain_tower_messages(&mut self) -> Vec<TowerMessage> {
        std::mem::take(&mut self.tower_out)
    }

    /// Stops sending anything that belongs to a step after `step` of the
    /// next update.
    pub fn halt_after(&mut self, step: u8) {
        self.halt_after = Some(step);
    }

    // ---- bookkeeping -----------------------------------------------------

    fn record(&mut self, event: EngineEvent) {
        self.log.push(EngineRecord { tick: self.now, role: self.cfg.role, event });
    }

    fn set_phase(&mut self, p: ProtocolPhase) {
        if self.phase != p {
            self.phase = p.clone();
            self.record(EngineEvent::Phase { to: p });
        }
    }

    fn send(&mut self, isn: u32, step: u8, body: OffchainMessage) {
        let name = body.name();
        if self.frozen || self.halt_after.is_some_and(|h| step > h && step > 0) {
            self.frozen = true;
            self.record(EngineEvent::Dropped { msg: name, isn, step });
            return;
        }
        self.record(EngineEvent::Sent { msg: name, isn, step });
        self.outbox.push_back(Envelope { channel: self.channel, isn, step, body });
    }

    fn p(&self) -> &ChannelParams {
        self.params.as_ref().expect("params after handshake")
    }

    fn a(&self) -> &Anchors {
        self.anchors.as_ref().expect("anchors after handshake")
    }

    fn me(&self) -> PeerRole {
        self.cfg.role
    }

    fn partials(&self, templates: &[&Template]) -> Vec<TemplatePartial> {
        let keyset = self.p().keyset;
        templates
            .iter()
            .flat_map(|t| {
                let sighash = t.sighash();
                t.covenant_paths().into_iter().map(move |path| TemplatePartial {
                    kind: t.kind,
                    path,
                    sig: self.key.partial_covenant(&keyset, &sighash, path),
                })
            })
            .collect()
    }

    /// Verifies the peer's partials for every path of `templates` and
    /// aggregates them with this owner's own.
    fn absorb(&self, book: &mut SigBook, templates: &[&Template], partials: &[TemplatePartial]) -> Result<(), ChannelError> {
        let keyset = self.p().keyset;
        let peer = self.me().other();
        for t in templates {
            let sighash = t.sighash();
            for path in t.covenant_paths() {
                let theirs = partials
                    .iter()
                    .find(|p| p.kind == t.kind && p.path == path && p.sig.role == peer)
                    .filter(|p| self.registry.verify_partial(&keyset, &p.sig, &sighash, path))
                    .ok_or(ChannelError::BadSignature { kind: t.kind, path })?;
                let mine = self.key.partial_covenant(&keyset, &sighash, path);
                book.insert(t.kind, path, CovenantSignature::aggregate(path, &[mine, theirs.sig])?);
            }
        }
        Ok(())
    }

    fn step3_templates(b: &Built) -> Vec<&Template> {
        let mut v = vec![&b.exit.assert_exit, &b.exit.finalize_exit];
        if let Some(p) = &b.punish {
            v.extend(p.pairs().into_iter().map(|pp| &pp.punish));
        }
        v
    }

    fn revoke_templates(b: &Built, role: PeerRole) -> Vec<&Template> {
        let mut v = Vec::new();
        if let Some(p) = &b.punish {
            v.push(&p.against(role).commit);
            if let Some(t) = p.tower_against(role) {
                v.push(&t.commit);
            }
        }
        v
    }

    fn setup_templates(&self, b: &Built) -> Vec<Template> {
        let mut v: Vec<Template> = b.exit.templates().into_iter().cloned().collect();
        v.extend(self.wt_structure.iter().cloned());
        v
    }

    fn l3_round(&self, esn: u32) -> Result<L3Round, ChannelError> {
        let me = self.me();
        Ok(L3Round {
            against_me: l3_tower_pair(self.p(), self.a(), me.other(), esn)?,
            against_peer: l3_tower_pair(self.p(), self.a(), me, esn)?,
            my_packet: None,
            peer_packet: None,
        })
    }

    /// Aggregates the pair against this owner and encrypts it for the
    /// peer's tower under `K(isn + 1)` of the chain this owner holds.
    fn seal_packet(&mut self, round: &mut L3Round, isn: u32, partials: &[TemplatePartial]) -> Result<(), ChannelError> {
        let mut book = SigBook::default();
        self.absorb(&mut book, &[&round.against_me.commit, &round.against_me.punish], partials)?;
        let signed = SignedPair::from_book(&round.against_me, &book).expect("both paths absorbed");
        let mut body = Vec::with_capacity(2 * COVENANT_SIG_LEN);
        body.extend_from_slice(&signed.commit_sig.to_bytes());
        body.extend_from_slice(&signed.punish_sig.to_bytes());
        let index = isn.checked_add(1).ok_or(ChannelError::KeyChainExhausted)?;
        let key = self.my_chain.as_ref().expect("level-3 chain").derive(index).map_err(|_| ChannelError::KeyChainExhausted)?;
        round.my_packet = Some(encrypt(&key, &body, self.rng.gen()));
        Ok(())
    }

    fn l3_payload(&self, isn: u32, round: &L3Round) -> Option<Vec<u8>> {
        let (mine, peer) = (round.my_packet.as_ref()?, round.peer_packet.as_ref()?);
        // the packet for Alice's tower punishes Bob and is sealed by Bob
        let (for_alice, for_bob) = match self.me() {
            PeerRole::Alice => (peer, mine),
            PeerRole::Bob => (mine, peer),
        };
        Some(l3_commit_payload(isn, for_alice, for_bob))
    }

    fn build_state(&self, snapshot: StateSnapshot, payload: Option<Vec<u8>>) -> Result<Built, ChannelError> {
        let exit = build_exit_set(self.p(), self.a(), &snapshot, payload.as_deref())?;
        let punish = if snapshot.isn > 0 { Some(build_punish_set(self.p(), self.a(), &snapshot)?) } else { None };
        Ok(Built { snapshot, exit, punish, sigs: SigBook::default() })
    }

    // ---- setup -----------------------------------------------------------

    /// Starts the setup handshake. Alice proposes; Bob waits for the offer.
    pub fn open(&mut self, funding: Vec<FundingInput>) -> Result<(), ChannelError> {
        if self.phase != ProtocolPhase::Init {
            return Err(ChannelError::WrongPhase(format!("{:?}", self.phase)));
        }
        self.funding = funding;
        self.set_phase(ProtocolPhase::SettingUp);
        self.waiting_since = Some(self.now);
        if self.me() == PeerRole::Bob {
            return Ok(());
        }
        let esn0 = self.seq.initial(&mut self.rng);
        let level = self.cfg.level;
        let p_e = (level == PrivacyLevel::L2).then(|| Preimage(self.rng.gen()));
        let nonce = (level >= PrivacyLevel::L2).then(|| Digest(self.rng.gen()));
        self.channel = Digest(self.rng.gen());
        let offer = SetupOffer { info: self.peer_info(), terms: self.cfg.terms(), esn0, p_e, wt_nonce: nonce };
        self.round = Some(SetupRound {
            alice: Some(offer.info.clone()),
            bob: None,
            esn0,
            p_e,
            nonce,
            setup: None,
            l3: None,
            built: None,
            published: false,
        });
        self.send(0, 0, OffchainMessage::SetupOffer(Box::new(offer)));
        Ok(())
    }

    fn peer_info(&self) -> PeerInfo {
        PeerInfo {
            key: self.key.public(),
            preimage_hash: self.preimage.hash(),
            ots_key: self.ots.public().clone(),
            deposit: self.cfg.deposit,
            funding: self.funding.clone(),
            tower_key: self.cfg.tower_key,
        }
    }

    /// Builds parameters, Setup and anchors once both halves are known.
    fn assemble(&mut self) -> Result<(), ChannelError> {
        let round = self.round.as_ref().expect("setup round");
        let (a, b) = (round.alice.clone().expect("alice info"), round.bob.clone().expect("bob info"));
        if a.funding.iter().any(|f| f.owner != PeerRole::Alice) || b.funding.iter().any(|f| f.owner != PeerRole::Bob) {
            return Err(ChannelError::HandshakeMismatch("funding owner"));
        }
        let cfg = &self.cfg;
        let params = ChannelParams {
            i_bal: a.deposit + b.deposit,
            epsilon: cfg.epsilon,
            timeout: cfg.timeout,
            alice_key: a.key,
            bob_key: b.key,
            h_a: a.preimage_hash,
            h_b: b.preimage_hash,
            k_a: a.ots_key.clone(),
            k_b: b.ots_key.clone(),
            keyset: crate::crypto::CovenantKeySet { alice: a.key, bob: b.key },
            level: cfg.level,
            wt_outputs: cfg.wt_outputs,
            h_e: round.p_e.map(|p| p.hash()),
            wt_nonce: round.nonce,
            tower_reward: cfg.tower_reward,
            tower_a_key: a.tower_key,
            tower_b_key: b.tower_key,
            chain_len: cfg.chain_len,
        };
        params.validate()?;
        let state0 = StateSnapshot::initial(a.deposit, b.deposit, round.esn0);
        let funding: Vec<FundingInput> = a.funding.iter().chain(b.funding.iter()).copied().collect();
        let setup = build_setup(&params, &state0, &funding)?;
        let anch = anchors(&params, &setup.tx)?;
        self.wt_structure = if params.level >= PrivacyLevel::L2 { Some(build_wt_structure(&params, setup.txid())?) } else { None };
        self.setup_txid = Some(setup.txid());
        self.p_e = round.p_e;
        self.params = Some(params);
        self.anchors = Some(anch);
        if self.cfg.level == PrivacyLevel::L3 {
            let seed = tagged_hash("l3/chain", &[&self.rng.gen::<[u8; 32]>()]);
            self.my_chain = Some(HashChain::new(seed, self.cfg.chain_len)?);
        }
        self.round.as_mut().expect("setup round").setup = Some(setup);
        Ok(())
    }

    fn setup_build_state0(&mut self) -> Result<(), ChannelError> {
        let round = self.round.as_ref().expect("setup round");
        let payload = match &round.l3 {
            Some(r) => Some(self.l3_payload(0, r).ok_or(ChannelError::TowerPacket("missing setup packet"))?),
            None => None,
        };
        let state0 = StateSnapshot::initial(self.p().i_bal - round.bob.as_ref().expect("bob").deposit, round.bob.as_ref().expect("bob").deposit, round.esn0);
        let built = self.build_state(state0, payload)?;
        self.round.as_mut().expect("setup round").built = Some(built);
        Ok(())
    }

    fn send_setup_sigs(&mut self) {
        let templates = self.setup_templates(self.round.as_ref().expect("round").built.as_ref().expect("state 0"));
        let refs: Vec<&Template> = templates.iter().collect();
        let partials = self.partials(&refs);
        self.send(0, 0, OffchainMessage::SigBundle { partials });
    }

    fn absorb_setup_sigs(&mut self, partials: &[TemplatePartial]) -> Result<(), ChannelError> {
        let mut built = self.round.as_mut().expect("round").built.take().expect("state 0");
        let templates = self.setup_templates(&built);
        let refs: Vec<&Template> = templates.iter().collect();
        let mut book = SigBook::default();
        let r = self.absorb(&mut book, &refs, partials);
        for (kind, paths) in book.0 {
            for (path, sig) in paths {
                match kind {
                    TxKind::ExpireAliceExit | TxKind::ExpireBobExit | TxKind::WtDisputes | TxKind::StartExit => {
                        self.static_sigs.insert(kind, path, sig)
                    }
                    _ => built.sigs.insert(kind, path, sig),
                }
            }
        }
        self.round.as_mut().expect("round").built = Some(built);
        r
    }

    fn funding_sigs(&self) -> Vec<(Outpoint, crate::crypto::Signature)> {
        let setup = self.round.as_ref().expect("round").setup.as_ref().expect("setup");
        let sighash = setup.sighash();
        setup
            .tx
            .inputs
            .iter()
            .filter(|i| self.funding.iter().any(|f| f.outpoint == i.prevout))
            .map(|i| (i.prevout, self.key.sign(&sighash)))
            .collect()
    }

    fn l3_tower_registration(&mut self) {
        if self.cfg.tower_key.is_none() {
            return;
        }
        let me = self.me();
        let (p, a) = (self.p(), self.a());
        let reg = L3Registration {
            client: me,
            keyset: p.keyset,
            cheater_key: p.ots_key(me.other()).clone(),
            beneficiary: p.address(me),
            reward: p.tower_address(me).map(|l| (p.tower_reward, l)),
            epsilon: p.epsilon,
        };
        let msg = TowerMessage {
            channel: a.q.expect("level-3 q"),
            level: PrivacyLevel::L3,
            kind: TowerMsgKind::Register,
            payload: serde_json::to_vec(&reg).expect("serializable"),
        };
        self.push_tower(msg);
    }

    fn push_tower(&mut self, msg: TowerMessage) {
        self.record(EngineEvent::Tower { kind: msg.kind });
        self.tower_out.push(msg);
    }

    fn on_setup_offer(&mut self, channel: Digest, offer: SetupOffer) -> Result<(), ChannelError> {
        if self.me() != PeerRole::Bob || self.phase != ProtocolPhase::SettingUp || self.round.is_some() {
            return Err(ChannelError::Unexpected { msg: "setup_offer", step: 0 });
        }
        if offer.terms != self.cfg.terms() {
            return Err(ChannelError::HandshakeMismatch("channel terms"));
        }
        if !self.seq.gap_allowed(0, offer.esn0) {
            return Err(ChannelError::BadEsn { previous: 0, proposed: offer.esn0 });
        }
        if (offer.p_e.is_some()) != (self.cfg.level == PrivacyLevel::L2) {
            return Err(ChannelError::HandshakeMismatch("tower key"));
        }
        self.channel = channel;
        self.seq.commit(0, offer.esn0);
        self.round = Some(SetupRound {
            alice: Some(offer.info.clone()),
            bob: Some(self.peer_info()),
            esn0: offer.esn0,
            p_e: offer.p_e,
            nonce: offer.wt_nonce,
            setup: None,
            l3: None,
            built: None,
            published: false,
        });
        self.assemble()?;
        let mut partials = Vec::new();
        if self.cfg.level == PrivacyLevel::L3 {
            let round = self.l3_round(offer.esn0)?;
            partials = self.partials(&[&round.against_peer.commit, &round.against_peer.punish]);
            self.round.as_mut().expect("round").l3 = Some(round);
        } else {
            self.setup_build_state0()?;
        }
        let info = Box::new(self.peer_info());
        self.send(0, 0, OffchainMessage::SetupAccept { info, partials });
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn on_setup_accept(&mut self, info: PeerInfo, partials: Vec<TemplatePartial>) -> Result<(), ChannelError> {
        let me = self.me();
        let round = self.round.as_mut().ok_or(ChannelError::Unexpected { msg: "setup_accept", step: 0 })?;
        if me != PeerRole::Alice || round.bob.is_some() {
            return Err(ChannelError::Unexpected { msg: "setup_accept", step: 0 });
        }
        round.bob = Some(info);
        self.assemble()?;
        if self.cfg.level == PrivacyLevel::L3 {
            let mut r = self.l3_round(self.seq.esn)?;
            self.seal_packet(&mut r, 0, &partials)?;
            let mine = self.partials(&[&r.against_peer.commit, &r.against_peer.punish]);
            let packet = r.my_packet.clone().expect("sealed");
            self.round.as_mut().expect("round").l3 = Some(r);
            self.send(0, 0, OffchainMessage::TowerPacket { partials: mine, packet });
        } else {
            self.setup_build_state0()?;
            self.send_setup_sigs();
        }
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn on_setup_packet(&mut self, partials: Vec<TemplatePartial>, packet: CipherPacket) -> Result<(), ChannelError> {
        let mut r = self
            .round
            .as_mut()
            .and_then(|r| r.l3.take())
            .ok_or(ChannelError::Unexpected { msg: "tower_packet", step: 0 })?;
        if packet.encoded_len() != crate::txgraph::L3_PACKET_LEN {
            return Err(ChannelError::TowerPacket("packet length"));
        }
        r.peer_packet = Some(packet);
        if self.me() == PeerRole::Bob {
            self.seal_packet(&mut r, 0, &partials)?;
            let packet = r.my_packet.clone().expect("sealed");
            self.round.as_mut().expect("round").l3 = Some(r);
            self.send(0, 0, OffchainMessage::TowerPacket { partials: Vec::new(), packet });
        } else {
            self.round.as_mut().expect("round").l3 = Some(r);
        }
        self.setup_build_state0()?;
        if self.me() == PeerRole::Alice {
            self.send_setup_sigs();
        }
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn on_setup_sigs(&mut self, partials: Vec<TemplatePartial>) -> Result<(), ChannelError> {
        if self.round.as_ref().and_then(|r| r.built.as_ref()).is_none() {
            return Err(ChannelError::Unexpected { msg: "sig_bundle", step: 0 });
        }
        self.absorb_setup_sigs(&partials)?;
        if self.me() == PeerRole::Bob {
            self.send_setup_sigs();
            let sigs = self.funding_sigs();
            self.send(0, 0, OffchainMessage::FundingSigs { sigs });
        }
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn on_funding_sigs(&mut self, sigs: Vec<(Outpoint, crate::crypto::Signature)>, chain: &mut Chain) -> Result<(), ChannelError> {
        let round = self.round.as_ref().ok_or(ChannelError::Unexpected { msg: "funding_sigs", step: 0 })?;
        if self.me() != PeerRole::Alice || round.built.as_ref().is_none_or(|b| !b.exit_complete()) {
            return Err(ChannelError::Unexpected { msg: "funding_sigs", step: 0 });
        }
        let mut setup = round.setup.clone().expect("setup");
        let sighash = setup.sighash();
        let mut all = self.funding_sigs();
        all.extend(sigs);
        for i in 0..setup.tx.inputs.len() {
            let prevout = setup.tx.inputs[i].prevout;
            let sig = all.iter().find(|(o, _)| *o == prevout).map(|(_, s)| s.clone());
            let sig = sig.ok_or(ChannelError::HandshakeMismatch("funding signature missing"))?;
            let owner = round.alice.iter().chain(round.bob.iter()).find(|p| p.funding.iter().any(|f| f.outpoint == prevout));
            if !owner.is_some_and(|o| self.registry.verify(&sig, &o.key, &sighash)) {
                return Err(ChannelError::HandshakeMismatch("funding signature invalid"));
            }
            setup.set_witness(i, SpendPath::SingleKey, &SpendMaterial { signature: Some(sig), ..Default::default() })?;
        }
        match chain.submit(setup.tx.clone()) {
            Ok(txid) => {
                self.record(EngineEvent::Published { kind: TxKind::Setup, txid });
                self.round.as_mut().expect("round").published = true;
                Ok(())
            }
            Err(e) => Err(ChannelError::FundingRejected(format!("{e:?}"))),
        }
    }

    /// Moves to `Open(0)` once Setup is confirmed.
    fn check_setup_confirmed(&mut self, chain: &Chain) {
        let Some(txid) = self.setup_txid else { return };
        if self.phase != ProtocolPhase::SettingUp || !chain.is_confirmed(&txid) {
            return;
        }
        let Some(built) = self.round.as_ref().and_then(|r| r.built.clone()).filter(|b| b.exit_complete()) else {
            return;
        };
        let round = self.round.take().expect("round");
        if let Some(l3) = round.l3 {
            self.tower_check = Some((l3.against_peer, l3.peer_packet.expect("peer packet")));
        }
        self.seq.commit(0, built.snapshot.esn);
        self.current = Some(built);
        self.waiting_since = None;
        self.set_phase(ProtocolPhase::Open { isn: 0 });
        if self.cfg.tower_key.is_some() {
            match self.cfg.level {
                PrivacyLevel::L1 => {
                    let msg = TowerMessage {
                        channel: txid,
                        level: PrivacyLevel::L1,
                        kind: TowerMsgKind::Register,
                        payload: Vec::new(),
                    };
                    self.push_tower(msg);
                }
                PrivacyLevel::L2 => {}
                PrivacyLevel::L3 => self.l3_tower_registration(),
            }
        }
    }

    // ---- updates ---------------------------------------------------------

    /// Step 1 as the payer: proposes the next state.
    pub fn propose(&mut self, ops: Vec<UpdateOp>, chain: &Chain) -> Result<(), ChannelError> {
        if !self.is_idle() {
            return Err(ChannelError::Busy);
        }
        let cur = self.current.as_ref().expect("open state").snapshot.clone();
        let isn = cur.isn + 1;
        let mut next = apply_ops(&cur, &ops, chain.height())?;
        next.isn = isn;
        next.esn = self.seq.next_esn(&mut self.rng)?;
        next.check(self.p().i_bal)?;
        let mut partials = Vec::new();
        let mut l3 = None;
        if self.cfg.level == PrivacyLevel::L3 {
            if isn + 1 > self.cfg.chain_len {
                return Err(ChannelError::KeyChainExhausted);
            }
            let r = self.l3_round(next.esn)?;
            partials = self.partials(&[&r.against_peer.commit, &r.against_peer.punish]);
            l3 = Some(r);
        }
        let esn = next.esn;
        self.pending = Some(Pending { proposer: true, next, built: None, l3, step: 1, revoked: false });
        self.set_phase(ProtocolPhase::Updating { from: cur.isn, step: 1 });
        self.send(isn, 1, OffchainMessage::Propose { esn, ops, partials });
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn set_step(&mut self, step: u8) {
        if let Some(p) = self.pending.as_mut() {
            p.step = step;
            let from = p.next.isn - 1;
            self.set_phase(ProtocolPhase::Updating { from, step });
        }
    }

    fn on_propose(&mut self, isn: u32, esn: u32, ops: Vec<UpdateOp>, partials: Vec<TemplatePartial>, chain: &Chain) -> Result<(), ChannelError> {
        if let Some(p) = &self.pending {
            // simultaneous proposals: Alice's wins
            if p.proposer && p.step == 1 && self.me() == PeerRole::Bob {
                self.pending = None;
            } else {
                return Err(ChannelError::Busy);
            }
        }
        if !matches!(self.phase, ProtocolPhase::Open { .. } | ProtocolPhase::Updating { .. }) {
            return Err(ChannelError::WrongPhase(format!("{:?}", self.phase)));
        }
        let cur = self.current.as_ref().expect("open state").snapshot.clone();
        if isn != cur.isn + 1 {
            return Err(ChannelError::Unexpected { msg: "propose", step: 1 });
        }
        self.seq.check_next(esn)?;
        let mut next = apply_ops(&cur, &ops, chain.height())?;
        next.isn = isn;
        next.esn = esn;
        next.check(self.p().i_bal)?;
        let mut pending = Pending { proposer: false, next: next.clone(), built: None, l3: None, step: 1, revoked: false };
        let mut ack_partials = Vec::new();
        let mut packet = None;
        if self.cfg.level == PrivacyLevel::L3 {
            if isn + 1 > self.cfg.chain_len {
                return Err(ChannelError::KeyChainExhausted);
            }
            let mut r = self.l3_round(esn)?;
            self.seal_packet(&mut r, isn, &partials)?;
            ack_partials = self.partials(&[&r.against_peer.commit, &r.against_peer.punish]);
            packet = r.my_packet.clone();
            pending.l3 = Some(r);
        } else {
            pending.built = Some(self.build_state(next, None)?);
            pending.step = 2;
        }
        self.pending = Some(pending);
        self.set_phase(ProtocolPhase::Updating { from: cur.isn, step: 1 });
        self.send(isn, 1, OffchainMessage::StepAck { partials: ack_partials, packet });
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn pending_isn(&self) -> Option<u32> {
        self.pending.as_ref().map(|p| p.next.isn)
    }

    fn on_ack(&mut self, isn: u32, partials: Vec<TemplatePartial>, packet: Option<CipherPacket>) -> Result<(), ChannelError> {
        let ok = self.pending.as_ref().is_some_and(|p| p.proposer && p.step == 1 && p.next.isn == isn);
        if !ok {
            return Err(ChannelError::Unexpected { msg: "step_ack", step: 1 });
        }
        let mut pending = self.pending.take().expect("pending");
        if let Some(mut r) = pending.l3.take() {
            let packet = packet.ok_or(ChannelError::TowerPacket("missing packet"))?;
            if packet.encoded_len() != crate::txgraph::L3_PACKET_LEN {
                return Err(ChannelError::TowerPacket("packet length"));
            }
            r.peer_packet = Some(packet);
            self.seal_packet(&mut r, isn, &partials)?;
            let mine = r.my_packet.clone().expect("sealed");
            let payload = self.l3_payload(isn, &r);
            pending.built = Some(self.build_state(pending.next.clone(), payload)?);
            pending.l3 = Some(r);
            self.pending = Some(pending);
            self.send(isn, 1, OffchainMessage::TowerPacket { partials: Vec::new(), packet: mine });
        } else {
            pending.built = Some(self.build_state(pending.next.clone(), None)?);
            self.pending = Some(pending);
        }
        self.set_step(2);
        self.send_step3(isn);
        Ok(())
    }

    fn send_step3(&mut self, isn: u32) {
        let built = self.pending.as_ref().and_then(|p| p.built.as_ref()).expect("built");
        let partials = self.partials(&Self::step3_templates(built));
        self.send(isn, 3, OffchainMessage::SigBundle { partials });
        self.set_step(3);
        self.waiting_since = Some(self.now);
    }

    fn on_update_packet(&mut self, isn: u32, packet: CipherPacket) -> Result<(), ChannelError> {
        let ok = self.pending.as_ref().is_some_and(|p| !p.proposer && p.step == 1 && p.next.isn == isn && p.l3.is_some());
        if !ok {
            return Err(ChannelError::Unexpected { msg: "tower_packet", step: 1 });
        }
        if packet.encoded_len() != crate::txgraph::L3_PACKET_LEN {
            return Err(ChannelError::TowerPacket("packet length"));
        }
        let mut pending = self.pending.take().expect("pending");
        let mut r = pending.l3.take().expect("l3 round");
        r.peer_packet = Some(packet);
        let payload = self.l3_payload(isn, &r);
        pending.built = Some(self.build_state(pending.next.clone(), payload)?);
        pending.l3 = Some(r);
        pending.step = 2;
        self.pending = Some(pending);
        self.set_step(2);
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn absorb_pending(&mut self, pick: impl Fn(&Built) -> Vec<&Template>, partials: &[TemplatePartial]) -> Result<(), ChannelError> {
        let mut pending = self.pending.take().expect("pending");
        let built = pending.built.as_mut().expect("built");
        let mut book = std::mem::take(&mut built.sigs);
        let r = self.absorb(&mut book, &pick(built), partials);
        built.sigs = book;
        self.pending = Some(pending);
        r
    }

    fn on_bundle(&mut self, isn: u32, step: u8, partials: Vec<TemplatePartial>) -> Result<(), ChannelError> {
        let Some(p) = self.pending.as_ref().filter(|p| p.next.isn == isn && p.built.is_some()) else {
            return Err(ChannelError::Unexpected { msg: "sig_bundle", step });
        };
        let (proposer, at) = (p.proposer, p.step);
        let me = self.me();
        let peer = me.other();
        match (proposer, step) {
            // payee receives the payer's step-3 bundle and answers with its own plus step 4
            (false, 3) if at == 2 => {
                self.absorb_pending(Self::step3_templates, &partials)?;
                self.send_step3(isn);
                let built = self.pending.as_ref().and_then(|p| p.built.as_ref()).expect("built");
                let partials = self.partials(&[&built.exit.commit_exit]);
                self.send(isn, 4, OffchainMessage::SigBundle { partials });
                self.set_step(4);
            }
            (true, 3) if at == 3 => {
                self.absorb_pending(Self::step3_templates, &partials)?;
                self.set_step(3);
            }
            // payer now holds the new CommitExit; revoke (5) and countersign (6)
            (true, 4) if at == 3 => {
                self.absorb_pending(|b| vec![&b.exit.commit_exit], &partials)?;
                self.set_step(4);
                let built = self.pending.as_ref().and_then(|p| p.built.as_ref()).expect("built");
                let revoke = self.partials(&Self::revoke_templates(built, me));
                let commit = self.partials(&[&built.exit.commit_exit]);
                self.reveal_key(isn, 5);
                self.send(isn, 5, OffchainMessage::SigBundle { partials: revoke });
                if self.frozen {
                    return Ok(());
                }
                self.pending.as_mut().expect("pending").revoked = true;
                self.set_step(5);
                self.send(isn, 6, OffchainMessage::SigBundle { partials: commit });
                if !self.frozen {
                    self.set_step(6);
                }
            }
            (false, 5) if at == 4 => {
                self.absorb_pending(|b| Self::revoke_templates(b, peer), &partials)?;
                self.refresh_store_from_pending();
                self.set_step(5);
            }
            (false, 6) if at == 5 => {
                self.absorb_pending(|b| vec![&b.exit.commit_exit], &partials)?;
                self.set_step(6);
                let built = self.pending.as_ref().and_then(|p| p.built.as_ref()).expect("built");
                let revoke = self.partials(&Self::revoke_templates(built, me));
                self.reveal_key(isn, 7);
                self.send(isn, 7, OffchainMessage::SigBundle { partials: revoke });
                if self.frozen {
                    return Ok(());
                }
                self.pending.as_mut().expect("pending").revoked = true;
                self.set_step(7);
                self.finish_update(8);
            }
            (true, 7) if at == 6 => {
                self.absorb_pending(|b| Self::revoke_templates(b, peer), &partials)?;
                self.refresh_store_from_pending();
                self.set_step(7);
                self.finish_update(9);
            }
            _ => return Err(ChannelError::Unexpected { msg: "sig_bundle", step }),
        }
        self.waiting_since = self.pending.as_ref().map(|_| self.now);
        Ok(())
    }

    fn reveal_key(&mut self, isn: u32, step: u8) {
        if let Some(chain) = &self.my_chain {
            let key = chain.derive(isn).expect("index within chain");
            self.send(isn, step, OffchainMessage::KeyReveal { index: isn, key });
        }
    }

    /// Checks the peer's packet for this owner's tower in CommitExit(isn−1)
    /// against the key it just revealed.
    fn on_key_reveal(&mut self, isn: u32, index: u32, key: Digest) -> Result<(), ChannelError> {
        let step = self.pending.as_ref().filter(|p| p.next.isn == isn).map(|p| p.step);
        if index != isn || step.is_none() {
            return Err(ChannelError::Unexpected { msg: "key_reveal", step: 0 });
        }
        let (pair, packet) = self.tower_check.as_ref().ok_or(ChannelError::TowerPacket("nothing to check"))?;
        let body = decrypt(&key, packet).map_err(|_| ChannelError::TowerPacket("decryption failed"))?;
        if body.len() != 2 * COVENANT_SIG_LEN {
            return Err(ChannelError::TowerPacket("payload length"));
        }
        let keyset = self.p().keyset;
        let cs = CovenantSignature::from_bytes(&body[..COVENANT_SIG_LEN])?;
        let ps = CovenantSignature::from_bytes(&body[COVENANT_SIG_LEN..])?;
        let good = self.registry.verify_covenant(&keyset, &cs, &pair.commit.sighash(), 0)
            && self.registry.verify_covenant(&keyset, &ps, &pair.punish.sighash(), 0);
        if !good {
            return Err(ChannelError::TowerPacket("signatures do not match templates"));
        }
        self.tower_key = Some((index, key));
        Ok(())
    }

    /// The peer's revocation for the pending state is complete; switch the
    /// punishment store to it.
    fn refresh_store_from_pending(&mut self) {
        let peer = self.me().other();
        let Some(built) = self.pending.as_ref().and_then(|p| p.built.as_ref()) else { return };
        let Some(set) = &built.punish else { return };
        let own = SignedPair::from_book(set.against(peer), &built.sigs);
        let tower = set.tower_against(peer).and_then(|t| SignedPair::from_book(t, &built.sigs));
        if let Some(own) = own {
            self.store = PunishStore { own: Some(own), tower };
        }
    }

    /// Steps 8 and 9: adopt the new state and hand material to the tower.
    fn finish_update(&mut self, step: u8) {
        if self.halt_after.is_some_and(|h| step > h) {
            self.frozen = true;
            return;
        }
        let pending = self.pending.take().expect("pending");
        let built = pending.built.expect("built");
        let isn = built.snapshot.isn;
        self.seq.commit(isn, built.snapshot.esn);
        if let Some(l3) = pending.l3 {
            self.tower_check = Some((l3.against_peer, l3.peer_packet.expect("peer packet")));
        }
        if let Some(old) = self.current.replace(built) {
            if self.cfg.keep_history {
                self.history.insert(old.snapshot.isn, old);
            }
        }
        self.forward_to_tower();
        self.waiting_since = None;
        self.set_phase(ProtocolPhase::Open { isn });
    }

    fn forward_to_tower(&mut self) {
        if self.cfg.tower_key.is_none() {
            return;
        }
        match self.cfg.level {
            PrivacyLevel::L1 => {
                let pair = if self.cfg.wt_outputs { self.store.tower.clone() } else { self.store.own.clone() };
                if let (Some(pair), Some(setup)) = (pair, self.setup_txid) {
                    let msg = TowerMessage {
                        channel: setup,
                        level: PrivacyLevel::L1,
                        kind: TowerMsgKind::Update,
                        payload: serde_json::to_vec(&pair).expect("serializable"),
                    };
                    self.push_tower(msg);
                }
            }
            PrivacyLevel::L2 => {
                let htlcs = self.current.as_ref().map(|b| b.snapshot.htlcs.clone()).unwrap_or_default();
                if !htlcs.is_empty() {
                    let body = serde_json::to_vec(&htlcs).expect("serializable");
                    let packet = encrypt(&self.tower_secret(), &body, self.rng.gen());
                    let msg = TowerMessage {
                        channel: self.a().q.expect("q"),
                        level: PrivacyLevel::L2,
                        kind: TowerMsgKind::HtlcStore,
                        payload: packet.to_bytes(),
                    };
                    self.push_tower(msg);
                }
            }
            PrivacyLevel::L3 => {
                if let Some((index, key)) = self.tower_key {
                    let msg = TowerMessage {
                        channel: self.a().q.expect("q"),
                        level: PrivacyLevel::L3,
                        kind: TowerMsgKind::Update,
                        payload: encode_l3_key(index, &key),
                    };
                    self.push_tower(msg);
                }
            }
        }
    }

    fn tower_secret(&self) -> Digest {
        Digest(self.p_e.expect("level-2 key").0)
    }

    /// Level 2: one packet per tick, re-encrypted with a fresh IV.
    fn send_l2_packet(&mut self) {
        if self.cfg.level != PrivacyLevel::L2 || self.cfg.tower_key.is_none() || self.current.is_none() {
            return;
        }
        let payload = self.store.tower.as_ref().zip(self.wt_structure.as_ref()).map(|(pair, wt)| {
            let mut book = SigBook::default();
            if let Some(s) = self.static_sigs.get(TxKind::WtDisputes, 0) {
                book.insert(TxKind::WtDisputes, 0, *s);
            }
            let wt_disputes = complete(wt, &book, &SpendMaterial::default(), &[]).expect("covenant witness");
            L2Payload { wt_disputes, pair: pair.clone() }
        });
        let body = pad_l2(payload.as_ref());
        let packet = encrypt(&self.tower_secret(), &body, self.rng.gen());
        let msg = TowerMessage {
            channel: self.a().q.expect("q"),
            level: PrivacyLevel::L2,
            kind: TowerMsgKind::Update,
            payload: packet.to_bytes(),
        };
        self.push_tower(msg);
    }

    // ---- message dispatch ------------------------------------------------

    pub fn handle(&mut self, env: Envelope, chain: &mut Chain) {
        if self.frozen || matches!(self.phase, ProtocolPhase::Closed) {
            return;
        }
        let name = env.body.name();
        self.record(EngineEvent::Received { msg: name, isn: env.isn, step: env.step });
        if self.channel != Digest::ZERO && env.channel != self.channel {
            return;
        }
        let (isn, step) = (env.isn, env.step);
        let res = match env.body {
            OffchainMessage::SetupOffer(o) => self.on_setup_offer(env.channel, *o),
            OffchainMessage::SetupAccept { info, partials } => self.on_setup_accept(*info, partials),
            OffchainMessage::TowerPacket { partials, packet } if step == 0 => self.on_setup_packet(partials, packet),
            OffchainMessage::TowerPacket { packet, .. } => self.on_update_packet(isn, packet),
            OffchainMessage::SigBundle { partials } if step == 0 => self.on_setup_sigs(partials),
            OffchainMessage::FundingSigs { sigs } => self.on_funding_sigs(sigs, chain),
            OffchainMessage::Propose { esn, ops, partials } => self.on_propose(isn, esn, ops, partials, chain),
            OffchainMessage::StepAck { partials, packet } => self.on_ack(isn, partials, packet),
            OffchainMessage::SigBundle { partials } => self.on_bundle(isn, step, partials),
            OffchainMessage::KeyReveal { index, key } => self.on_key_reveal(isn, index, key),
            OffchainMessage::CloseRequest { fee, partials } => self.on_close_request(fee, partials),
            OffchainMessage::CloseAccept { partials } => self.on_close_accept(partials, chain),
            OffchainMessage::Abort { reason } => {
                self.abort(format!("peer aborted: {reason}"), false, chain);
                Ok(())
            }
        };
        if let Err(e) = res {
            self.abort(e.to_string(), true, chain);
        }
    }

    /// Gives up on the in-flight exchange. With the channel funded this
    /// falls back to a unilateral exit with the best safe state.
    fn abort(&mut self, reason: String, notify: bool, chain: &mut Chain) {
        if matches!(self.phase, ProtocolPhase::Closed | ProtocolPhase::Aborted) && self.own_exit.is_some() {
            return;
        }
        self.record(EngineEvent::Abort { reason: reason.clone() });
        if notify {
            let isn = self.pending_isn().unwrap_or(0);
            self.send(isn, 0, OffchainMessage::Abort { reason });
        }
        self.waiting_since = None;
        self.close = None;
        if self.current.is_some() {
            self.set_phase(ProtocolPhase::Aborted);
            let _ = self.unilateral_exit(chain);
        } else {
            self.set_phase(ProtocolPhase::Aborted);
        }
    }

    // ---- closing ---------------------------------------------------------

    pub fn cooperative_close(&mut self, fee: u64) -> Result<(), ChannelError> {
        if !self.is_idle() {
            return Err(ChannelError::Busy);
        }
        let built = self.current.as_ref().expect("open");
        if !built.snapshot.htlcs.is_empty() {
            return Err(ChannelError::CloseRefused("open HTLCs"));
        }
        let t = build_cooperative_close(self.p(), self.a(), &built.snapshot, fee)?;
        let partials = self.partials(&[&t]);
        self.close = Some((t, SigBook::default()));
        self.close_fee = Some(fee);
        let isn = built.snapshot.isn;
        self.set_phase(ProtocolPhase::CoopClosing);
        self.send(isn, 0, OffchainMessage::CloseRequest { fee, partials });
        self.waiting_since = Some(self.now);
        Ok(())
    }

    fn on_close_request(&mut self, fee: u64, partials: Vec<TemplatePartial>) -> Result<(), ChannelError> {
        if !self.is_idle() {
            return Err(ChannelError::Busy);
        }
        let built = self.current.as_ref().expect("open");
        if !built.snapshot.htlcs.is_empty() {
            return Err(ChannelError::CloseRefused("open HTLCs"));
        }
        let t = build_cooperative_close(self.p(), self.a(), &built.snapshot, fee)?;
        let mut book = SigBook::default();
        self.absorb(&mut book, &[&t], &partials)?;
        let mine = self.partials(&[&t]);
        let isn = built.snapshot.isn;
        self.close = Some((t, book));
        self.set_phase(ProtocolPhase::CoopClosing);
        self.send(isn, 0, OffchainMessage::CloseAccept { partials: mine });
        Ok(())
    }

    fn on_close_accept(&mut self, partials: Vec<TemplatePartial>, chain: &mut Chain) -> Result<(), ChannelError> {
        let (t, mut book) = self.close.take().ok_or(ChannelError::Unexpected { msg: "close_accept", step: 0 })?;
        self.absorb(&mut book, &[&t], &partials)?;
        let me = self.me();
        let overrides: Vec<(usize, SpendPath)> = t
            .spends
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, SpendPath::UnilateralExit { .. }))
            .map(|(i, _)| (i, SpendPath::UnilateralExit { bob_branch: me == PeerRole::Bob }))
            .collect();
        let tx = complete(&t, &book, &self.own_material(), &overrides)?;
        self.publish(chain, TxKind::CooperativeClose, tx);
        self.close = Some((t, book));
        self.waiting_since = None;
        Ok(())
    }

    fn own_material(&self) -> SpendMaterial {
        let mut m = SpendMaterial::default();
        match self.me() {
            PeerRole::Alice => m.preimage_a = Some(self.preimage),
            PeerRole::Bob => m.preimage_b = Some(self.preimage),
        }
        m
    }

    /// Best state this owner may safely exit with: the current one unless
    /// it was already revoked, or the pending one once its exit set is
    /// fully signed. Ties go to the newer state.
    fn best_exit(&self) -> Option<Built> {
        let me = self.me();
        let mut options = Vec::new();
        let revoked = self.pending.as_ref().is_some_and(|p| p.revoked);
        if let Some(cur) = &self.current {
            if !revoked {
                options.push(cur.clone());
            }
        }
        if let Some(b) = self.pending.as_ref().and_then(|p| p.built.as_ref()).filter(|b| b.exit_complete()) {
            options.push(b.clone());
        }
        options.into_iter().rev().max_by_key(|b| b.snapshot.balance(me))
    }

    /// Starts the exit path with the best safe state.
    pub fn unilateral_exit(&mut self, chain: &mut Chain) -> Result<(), ChannelError> {
        let b = self.best_exit().ok_or(ChannelError::WrongPhase(format!("{:?}", self.phase)))?;
        self.start_exit(b, true, chain)
    }

    /// Exits with any state this owner ever signed, safe or not. Without
    /// `assert` the exit stops after CommitExit.
    pub fn exit_with_state(&mut self, isn: u32, assert: bool, chain: &mut Chain) -> Result<(), ChannelError> {
        let b = self
            .history
            .get(&isn)
            .cloned()
            .or_else(|| self.current.clone().filter(|b| b.snapshot.isn == isn))
            .or_else(|| self.pending.as_ref().and_then(|p| p.built.clone()).filter(|b| b.snapshot.isn == isn && b.exit_complete()))
            .ok_or(ChannelError::UnknownState(isn))?;
        self.start_exit(b, assert, chain)
    }

    fn start_exit(&mut self, b: Built, assert: bool, chain: &mut Chain) -> Result<(), ChannelError> {
        if self.own_exit.is_some() {
            return Ok(());
        }
        let commit_txid = b.exit.commit_exit.txid();
        self.own_exit = Some(OwnExit { built: b, commit_txid, assert });
        self.waiting_since = None;
        self.drive_own_exit(chain);
        Ok(())
    }

    fn publish(&mut self, chain: &mut Chain, kind: TxKind, tx: Transaction) -> bool {
        let txid = tx.txid();
        if self.submitted.contains(&txid) || chain.status(&txid).is_some() {
            return false;
        }
        match chain.submit(tx) {
            Ok(txid) => {
                self.submitted.insert(txid);
                self.record(EngineEvent::Published { kind, txid });
                true
            }
            Err(e) => {
                self.record(EngineEvent::Rejected { kind, reason: format!("{e:?}") });
                false
            }
        }
    }

    fn drive_own_exit(&mut self, chain: &mut Chain) {
        let Some(exit) = self.own_exit.clone() else { return };
        let me = self.me();
        let anchors = self.a().clone();
        // level 3 routes through StartExit first
        if let Some(wt) = self.wt_structure.clone().filter(|t| t.kind == TxKind::StartExit) {
            if chain.status(&wt.txid()).is_none() {
                let tx = complete(&wt, &self.static_sigs, &SpendMaterial::default(), &[]).expect("covenant witness");
                self.publish(chain, TxKind::StartExit, tx);
            }
        }
        let commit = &exit.built.exit.commit_exit;
        match commit_exit_at(chain, &anchors.unilateral) {
            None if chain.spender(&anchors.unilateral).is_none() => {
                let branch = [(0, SpendPath::UnilateralExit { bob_branch: me == PeerRole::Bob })];
                if let Ok(tx) = complete(commit, &exit.built.sigs, &self.own_material(), &branch) {
                    self.publish(chain, TxKind::CommitExit, tx);
                    self.set_phase(ProtocolPhase::UnilateralExiting { stage: ExitStage::Committed });
                }
            }
            Some(obs) if obs.tx.txid() == exit.commit_txid => {}
            _ => {
                // someone else's CommitExit won; react to it as the peer's
                self.own_exit = None;
                return;
            }
        }
        if !chain.status(&exit.commit_txid).is_some() || !exit.assert {
            return;
        }
        let commit_out = Outpoint::new(exit.commit_txid, 0);
        let assert = &exit.built.exit.assert_exit;
        if chain.spender(&commit_out).is_none() {
            let Ok(ots) = self.ots.sign(exit.built.snapshot.esn) else {
                self.record(EngineEvent::Abort { reason: "one-time key already used".into() });
                return;
            };
            let mut m = self.own_material();
            m.ots = Some(ots);
            m.preimage_e = self.p_e;
            let path = [(0, SpendPath::CommitExitAssert { bob_branch: me == PeerRole::Bob, with_tower_key: self.p().level == PrivacyLevel::L2 })];
            if let Ok(tx) = complete(assert, &exit.built.sigs, &m, &path) {
                self.publish(chain, TxKind::AssertExitState, tx);
                self.set_phase(ProtocolPhase::UnilateralExiting { stage: ExitStage::Asserted });
            }
        }
        self.try_finalize(&exit.built, None, chain);
    }

    /// Publishes FinalizeExit for `b` if its Ready output exists: at once
    /// with the peer's preimage, otherwise after the dispute window.
    fn try_finalize(&mut self, b: &Built, peer_preimage: Option<Preimage>, chain: &mut Chain) {
        let assert_txid = b.exit.assert_exit.txid();
        let ready = Outpoint::new(assert_txid, 0);
        if chain.status(&assert_txid).is_none() || chain.spender(&ready).is_some() {
            return;
        }
        let fin = &b.exit.finalize_exit;
        let mut m = self.own_material();
        let fast = peer_preimage.is_some();
        if let Some(p) = peer_preimage {
            match self.me() {
                PeerRole::Alice => m.preimage_b = Some(p),
                PeerRole::Bob => m.preimage_a = Some(p),
            }
        } else if chain.confirmations(&assert_txid).unwrap_or(0) < self.p().timeout || !chain.is_confirmed(&assert_txid) {
            return;
        }
        let path = if fast { SpendPath::ReadyFast } else { SpendPath::ReadyFinalize };
        if let Ok(tx) = complete(fin, &b.sigs, &m, &[(1, path)]) {
            if self.publish(chain, TxKind::FinalizeExit, tx) && self.own_exit.is_some() {
                self.set_phase(ProtocolPhase::UnilateralExiting { stage: ExitStage::Finalizing });
            }
        }
    }

    // ---- chain reactions -------------------------------------------------

    fn known_state_by_esn(&self, esn: u32) -> Option<Built> {
        self.current
            .iter()
            .chain(self.pending.iter().filter_map(|p| p.built.as_ref()))
            .chain(self.history.values())
            .find(|b| b.snapshot.esn == esn && b.sigs.covers(&b.exit.finalize_exit))
            .cloned()
    }

    fn react(&mut self, chain: &mut Chain) {
        let Some(anchors) = self.anchors.clone() else { return };
        if self.own_exit.is_some() {
            self.drive_own_exit(chain);
        }
        if let Some(obs) = commit_exit_at(chain, &anchors.unilateral) {
            let mine = self.own_exit.as_ref().is_some_and(|e| e.commit_txid == obs.tx.txid());
            if obs.initiator != self.me() {
                self.peer_preimage = Some(obs.preimage);
            }
            let commit_out = Outpoint::new(obs.tx.txid(), 0);
            match assert_at(chain, &commit_out) {
                Some(a) if a.asserter != self.me() => {
                    let key = self.p().ots_key(a.asserter).clone();
                    if let Ok(m) = key.recover_value(&a.ots) {
                        let punishable = self.store.own.as_ref().is_some_and(|p| p.punishes(m, &a.ots));
                        if punishable {
                            self.punish(m, &a.ots, chain);
                        } else if let Some(b) = self.known_state_by_esn(m) {
                            let peer = if obs.initiator != self.me() { Some(obs.preimage) } else { None };
                            self.try_finalize(&b, peer, chain);
                            if peer.is_none() {
                                self.try_finalize(&b, None, chain);
                            }
                        }
                    }
                }
                Some(_) => {}
                None if !mine && obs.initiator != self.me()
                    && chain.confirmations(&obs.tx.txid()).unwrap_or(0) >= self.p().timeout && chain.is_confirmed(&obs.tx.txid()) => {
                        self.expire(obs.initiator, commit_out, obs.preimage, chain);
                    }
                None => {}
            }
        }
        self.resolve_htlcs(chain);
        self.check_closed(chain);
    }

    fn punish(&mut self, asserted: u32, ots: &crate::crypto::OtsSignature, chain: &mut Chain) {
        let Some(pair) = self.store.own.clone() else { return };
        if chain.status(&pair.punish.txid()).is_some() {
            return;
        }
        let threshold = pair.threshold().unwrap_or(0);
        if !self.submitted.contains(&pair.commit.txid()) {
            self.record(EngineEvent::Punishing { asserted, threshold });
        }
        self.set_phase(ProtocolPhase::Disputing);
        self.publish(chain, pair.commit.kind, pair.commit_tx());
        self.publish(chain, pair.punish.kind, pair.punish_tx(ots));
    }

    fn expire(&mut self, staller: PeerRole, commit_out: Outpoint, preimage: Preimage, chain: &mut Chain) {
        let Some(cur) = self.current.clone() else { return };
        let mut t = cur.exit.expire(staller).clone();
        t.tx.inputs[0].prevout = commit_out;
        let mut m = SpendMaterial::default();
        match staller {
            PeerRole::Alice => m.preimage_a = Some(preimage),
            PeerRole::Bob => m.preimage_b = Some(preimage),
        }
        if let Ok(tx) = complete(&t, &self.static_sigs, &m, &[]) {
            if self.publish(chain, t.kind, tx) {
                self.set_phase(ProtocolPhase::TimedOutEnforcing);
            }
        }
    }

    /// After a FinalizeExit with HTLC outputs: claim with known preimages
    /// before expiry, refund own HTLCs from expiry on.
    fn resolve_htlcs(&mut self, chain: &mut Chain) {
        let Some(funds_spender) = chain.spender(&self.a().funds) else { return };
        if !chain.is_confirmed(&funds_spender) {
            return;
        }
        let states: Vec<Built> = self.current.iter().chain(self.pending.iter().filter_map(|p| p.built.as_ref())).chain(self.history.values()).cloned().collect();
        let Some(b) = states.into_iter().find(|b| b.exit.finalize_exit.txid() == funds_spender) else { return };
        let me = self.me();
        let first = b.exit.finalize_exit.tx.outputs.len() - b.snapshot.htlcs.len();
        let height = chain.height();
        for (k, h) in b.snapshot.htlcs.iter().enumerate() {
            let op = Outpoint::new(funds_spender, (first + k) as u32);
            if !chain.is_unspent(&op) || chain.spender(&op).is_some() {
                continue;
            }
            let to = self.address();
            if h.direction.receiver() == me && height < h.expiry {
                if let Some(p) = self.htlc_preimages.get(&h.payment_hash).copied() {
                    let tx = htlc::claim_tx(op, h, &self.key, p, &to);
                    self.publish(chain, TxKind::HtlcClaim, tx);
                }
            } else if h.direction.sender() == me && height >= h.expiry {
                let tx = htlc::refund_tx(op, h, &self.key, &to);
                self.publish(chain, TxKind::HtlcRefund, tx);
            }
        }
    }

    fn check_closed(&mut self, chain: &Chain) {
        if self.resolution.is_some() {
            return;
        }
        let Some(txid) = chain.spender(&self.a().funds) else { return };
        if !chain.is_confirmed(&txid) {
            return;
        }
        let kind = self.classify(txid);
        self.resolution = Some(Resolution { txid, kind });
        self.record(EngineEvent::Resolved { txid, kind });
        self.own_exit = None;
        self.pending = None;
        self.waiting_since = None;
        self.set_phase(ProtocolPhase::Closed);
    }

    fn classify(&self, txid: Digest) -> Option<TxKind> {
        let states = self.current.iter().chain(self.pending.iter().filter_map(|p| p.built.as_ref())).chain(self.history.values());
        for b in states {
            if b.exit.finalize_exit.txid() == txid {
                return Some(TxKind::FinalizeExit);
            }
            if let Some(p) = &b.punish {
                if let Some(t) = p.pairs().iter().find(|pp| pp.punish.txid() == txid) {
                    return Some(t.punish.kind);
                }
            }
        }
        if self.close.as_ref().is_some_and(|(t, _)| t.txid() == txid) {
            return Some(TxKind::CooperativeClose);
        }
        if self.store.own.iter().chain(self.store.tower.iter()).any(|p| p.punish.txid() == txid) {
            return Some(TxKind::PunishAlice);
        }
        None
    }

    /// One scheduling quantum: timeouts, chain reactions, tower cadence.
    pub fn tick(&mut self, now: u64, chain: &mut Chain) {
        self.now = now;
        self.check_setup_confirmed(chain);
        self.react(chain);
        if let Some(since) = self.waiting_since {
            if !self.frozen && now.saturating_sub(since) > self.cfg.step_timeout {
                let what = match &self.phase {
                    ProtocolPhase::Updating { step, .. } => format!("timeout after step {step}"),
                    p => format!("timeout in {p:?}"),
                };
                self.abort(what, true, chain);
            }
        }
        if !self.is_closed() && !self.frozen {
            self.send_l2_packet();
        }
    }
}
