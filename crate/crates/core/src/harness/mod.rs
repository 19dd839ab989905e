//! Deterministic simulation: two engines, optional towers and the chain,
//! stepped cooperatively one tick at a time.

mod scenario;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::chain::{Chain, TxOut};
use crate::channel::{EngineConfig, Envelope, PeerEngine, PeerRole, ReportSchedule, DEFAULT_D, DEFAULT_STEP_TIMEOUT};
use crate::crypto::{Digest, KeyRegistry, OtsParams, SigningKey};
use crate::script::{templates::single_key_script, OutputLock};
use crate::txgraph::{PrivacyLevel, TxKind};
use crate::watchtower::{Tower, TowerEventKind, TowerMode};

pub use scenario::{
    find_scenario, load_scenario, run, run_file, scenario_dir, Action, AssertionResult, Expect, Party, Scenario, ScenarioError,
    SimReport, SCENARIO_DIR_ENV,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub level: PrivacyLevel,
    pub alice_deposit: u64,
    pub bob_deposit: u64,
    pub epsilon: u64,
    pub timeout: u32,
    pub wt_outputs: bool,
    pub tower_reward: u64,
    pub chain_len: u32,
    pub d_max: u32,
    pub schedule: ReportSchedule,
    pub step_timeout: u64,
    pub value_bits: u32,
    pub chunk_bits: u32,
    pub alice_tower: Option<TowerMode>,
    pub bob_tower: Option<TowerMode>,
    pub alice_history: bool,
    pub bob_history: bool,
    /// Blocks are mined every this many ticks; 0 mines only on request.
    pub mine_every: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            level: PrivacyLevel::L1,
            alice_deposit: 500_000,
            bob_deposit: 500_000,
            epsilon: 1_000,
            timeout: 6,
            wt_outputs: true,
            tower_reward: 0,
            chain_len: 2048,
            d_max: DEFAULT_D,
            schedule: ReportSchedule::All,
            step_timeout: DEFAULT_STEP_TIMEOUT,
            value_bits: 32,
            chunk_bits: 4,
            alice_tower: None,
            bob_tower: None,
            alice_history: false,
            bob_history: false,
            mine_every: 1,
        }
    }
}

/// Extra coins minted next to each deposit to pay for connector outputs.
pub const FUNDING_SLACK: u64 = 100_000;

fn idx(r: PeerRole) -> usize {
    match r {
        PeerRole::Alice => 0,
        PeerRole::Bob => 1,
    }
}

pub struct Sim {
    pub cfg: SimConfig,
    pub chain: Chain,
    registry: KeyRegistry,
    engines: [PeerEngine; 2],
    towers: [Option<Tower>; 2],
    tower_keys: [SigningKey; 2],
    inbox: [VecDeque<Envelope>; 2],
    offline_until: [u64; 2],
    tick: u64,
    log: Vec<String>,
    cursors: [usize; 5],
    violations: Vec<String>,
    kinds: BTreeMap<Digest, TxKind>,
    minted: [u64; 2],
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Result<Sim, crate::channel::ChannelError> {
        let registry = KeyRegistry::new();
        let ots_params = OtsParams::new(cfg.value_bits, cfg.chunk_bits)?;
        let tower_keys = [
            SigningKey::from_seed(&crate::crypto::tagged_hash("sim/tower", &[&cfg.seed.to_le_bytes(), b"a"]).0),
            SigningKey::from_seed(&crate::crypto::tagged_hash("sim/tower", &[&cfg.seed.to_le_bytes(), b"b"]).0),
        ];
        let mut engines = Vec::new();
        for role in [PeerRole::Alice, PeerRole::Bob] {
            let (deposit, tower, history) = match role {
                PeerRole::Alice => (cfg.alice_deposit, cfg.alice_tower, cfg.alice_history),
                PeerRole::Bob => (cfg.bob_deposit, cfg.bob_tower, cfg.bob_history),
            };
            let tower_key = tower.map(|_| {
                registry.register(&tower_keys[idx(role)]);
                tower_keys[idx(role)].public()
            });
            let ec = EngineConfig {
                role,
                seed: cfg.seed,
                deposit,
                epsilon: cfg.epsilon,
                timeout: cfg.timeout,
                level: cfg.level,
                wt_outputs: cfg.wt_outputs,
                tower_reward: cfg.tower_reward,
                tower_key,
                step_timeout: cfg.step_timeout,
                chain_len: cfg.chain_len,
                schedule: cfg.schedule.clone(),
                d_max: cfg.d_max,
                ots_params,
                keep_history: history,
            };
            engines.push(PeerEngine::new(ec, &registry)?);
        }
        let bob = engines.pop().expect("two engines");
        let alice = engines.pop().expect("two engines");
        let towers = [
            cfg.alice_tower.map(|m| Tower::new("tower_alice", m)),
            cfg.bob_tower.map(|m| Tower::new("tower_bob", m)),
        ];
        Ok(Sim {
            chain: Chain::new(registry.clone()),
            registry,
            engines: [alice, bob],
            towers,
            tower_keys,
            inbox: [VecDeque::new(), VecDeque::new()],
            offline_until: [0, 0],
            tick: 0,
            log: Vec::new(),
            cursors: [0; 5],
            violations: Vec::new(),
            kinds: BTreeMap::new(),
            minted: [0, 0],
            cfg,
        })
    }

    /// Mints funding coins and runs the handshake until both owners reach
    /// `Open(0)`.
    pub fn open(&mut self) -> Result<(), String> {
        for role in [PeerRole::Alice, PeerRole::Bob] {
            let e = &self.engines[idx(role)];
            let amount = e.config().deposit + FUNDING_SLACK;
            let txid = self.chain.mint(vec![TxOut { amount, lock: e.address() }]);
            self.minted[idx(role)] += amount;
            let funding = vec![crate::txgraph::FundingInput {
                outpoint: crate::chain::Outpoint::new(txid, 0),
                amount,
                owner: role,
            }];
            self.engines[idx(role)].open(funding).map_err(|e| e.to_string())?;
        }
        self.chain.mine_blocks(1);
        let ok = self.run_until(200, |s| s.both_idle());
        if ok {
            Ok(())
        } else {
            Err(format!("setup did not complete: {:?} / {:?}", self.engines[0].phase(), self.engines[1].phase()))
        }
    }

    pub fn engine(&self, r: PeerRole) -> &PeerEngine {
        &self.engines[idx(r)]
    }

    pub fn engine_mut(&mut self, r: PeerRole) -> &mut PeerEngine {
        &mut self.engines[idx(r)]
    }

    /// Engine and chain at once, for calls that need both.
    pub fn with_engine<T>(&mut self, r: PeerRole, f: impl FnOnce(&mut PeerEngine, &mut Chain) -> T) -> T {
        f(&mut self.engines[idx(r)], &mut self.chain)
    }

    pub fn tower(&self, client: PeerRole) -> Option<&Tower> {
        self.towers[idx(client)].as_ref()
    }

    pub fn tower_mut(&mut self, client: PeerRole) -> Option<&mut Tower> {
        self.towers[idx(client)].as_mut()
    }

    /// Lets `client`'s tower hand its oldest pair to the counterparty.
    pub fn betray(&mut self, client: PeerRole) -> Option<Digest> {
        let ch = self.tower_channel(client)?;
        let t = self.towers[idx(client)].as_mut()?;
        t.betray(&ch, &mut self.chain)
    }

    /// Channel id under which `client` talks to its tower.
    pub fn tower_channel(&self, client: PeerRole) -> Option<Digest> {
        let e = self.engine(client);
        match self.cfg.level {
            PrivacyLevel::L1 => e.setup_txid(),
            _ => e.anchors()?.q,
        }
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn now(&self) -> u64 {
        self.tick
    }

    pub fn both_idle(&self) -> bool {
        self.engines.iter().all(|e| e.is_idle())
    }

    pub fn set_offline(&mut self, r: PeerRole, ticks: u64) {
        self.offline_until[idx(r)] = self.tick + ticks;
    }

    pub fn is_online(&self, r: PeerRole) -> bool {
        self.tick >= self.offline_until[idx(r)]
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn kind_of(&self, txid: &Digest) -> Option<TxKind> {
        self.kinds.get(txid).copied()
    }

    /// Channel funds spender once confirmed.
    pub fn resolution(&self) -> Option<(Digest, Option<TxKind>)> {
        let funds = self.engines[0].anchors()?.funds;
        let txid = self.chain.spender(&funds)?;
        self.chain.is_confirmed(&txid).then(|| (txid, self.kind_of(&txid)))
    }

    pub fn address(&self, p: Party) -> OutputLock {
        match p {
            Party::Alice => self.engines[0].address(),
            Party::Bob => self.engines[1].address(),
            Party::TowerAlice => OutputLock::ScriptHash(single_key_script(&self.tower_keys[0].public())),
            Party::TowerBob => OutputLock::ScriptHash(single_key_script(&self.tower_keys[1].public())),
        }
    }

    /// Value an owner has received from the channel: its on-chain balance
    /// minus the change it got back from Setup. Towers: plain balance.
    pub fn payout(&self, p: Party) -> u64 {
        let lock = self.address(p);
        let bal = self.chain.balance_of(&lock);
        let change: u64 = match p {
            Party::Alice | Party::Bob => self.engines[0]
                .setup_txid()
                .and_then(|s| self.chain.tx(&s))
                .map_or(0, |rec| rec.tx.outputs.iter().filter(|o| o.lock == lock).map(|o| o.amount).sum()),
            _ => 0,
        };
        bal.saturating_sub(change)
    }

    fn deliver(&mut self) {
        for _ in 0..64 {
            let mut moved = false;
            for r in 0..2 {
                let out = self.engines[r].drain_outbox();
                self.inbox[1 - r].extend(out);
            }
            for r in 0..2 {
                if self.tick < self.offline_until[r] {
                    continue;
                }
                while let Some(env) = self.inbox[r].pop_front() {
                    self.engines[r].handle(env, &mut self.chain);
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    }

    /// One scheduling quantum.
    pub fn step(&mut self) {
        self.tick += 1;
        let now = self.tick;
        self.deliver();
        for r in 0..2 {
            if now >= self.offline_until[r] {
                self.engines[r].tick(now, &mut self.chain);
            }
        }
        self.deliver();
        for r in 0..2 {
            let msgs = self.engines[r].drain_tower_messages();
            if let Some(t) = self.towers[r].as_mut() {
                for m in msgs {
                    let _ = t.ingest(now, &m);
                }
            }
        }
        for t in self.towers.iter_mut().flatten() {
            t.watch(now, &mut self.chain);
        }
        if self.cfg.mine_every > 0 && now.is_multiple_of(self.cfg.mine_every) {
            self.mine(1);
        }
        self.audit_states();
        self.collect_log();
    }

    pub fn mine(&mut self, blocks: u32) {
        self.chain.mine_blocks(blocks);
        if let Err(e) = self.chain.audit() {
            self.violations.push(format!("tick {}: chain audit: {e}", self.tick));
        }
    }

    fn audit_states(&mut self) {
        for e in &self.engines {
            let Some(p) = e.params() else { continue };
            for s in e.current_state().into_iter().chain(e.pending_state()) {
                if let Err(err) = s.check(p.i_bal) {
                    self.violations.push(format!("tick {}: {:?} state {}: {err}", self.tick, e.role(), s.isn));
                }
            }
        }
    }

    fn collect_log(&mut self) {
        for r in 0..2 {
            let recs = &self.engines[r].log()[self.cursors[r]..];
            for rec in recs {
                if let crate::channel::EngineEvent::Published { kind, txid } = &rec.event {
                    self.kinds.insert(*txid, *kind);
                }
                self.log.push(format!("engine {}", serde_json::to_string(rec).expect("serializable")));
            }
            self.cursors[r] = self.engines[r].log().len();
        }
        for r in 0..2 {
            if let Some(t) = &self.towers[r] {
                for ev in &t.events()[self.cursors[2 + r]..] {
                    if let TowerEventKind::Published { txid, kind } = &ev.kind {
                        self.kinds.insert(*txid, *kind);
                    }
                    self.log.push(format!("{} {}", t.name(), serde_json::to_string(ev).expect("serializable")));
                }
                self.cursors[2 + r] = t.events().len();
            }
        }
        let events = self.chain.events();
        for ev in &events[self.cursors[4]..] {
            self.log.push(format!("chain {}", serde_json::to_string(ev).expect("serializable")));
        }
        self.cursors[4] = events.len();
    }

    /// Steps until `done` holds or `max` ticks pass; returns whether it held.
    pub fn run_until(&mut self, max: u64, mut done: impl FnMut(&Sim) -> bool) -> bool {
        for _ in 0..max {
            if done(self) {
                return true;
            }
            self.step();
        }
        done(self)
    }

    pub fn run_ticks(&mut self, n: u64) {
        for _ in 0..n {
            self.step();
        }
    }

    /// One payment from `from`, run to completion.
    pub fn pay(&mut self, from: PeerRole, amount: u64) -> Result<(), String> {
        self.update(from, vec![crate::channel::UpdateOp::Pay { from, amount }])
    }

    pub fn update(&mut self, proposer: PeerRole, ops: Vec<crate::channel::UpdateOp>) -> Result<(), String> {
        let isn = self.engine(proposer).current_state().map(|s| s.isn).ok_or("channel not open")?;
        self.with_engine(proposer, |e, c| e.propose(ops, c)).map_err(|e| e.to_string())?;
        let done = self.run_until(100, |s| s.both_idle() || !s.engines.iter().all(|e| e.is_idle() || e.pending_state().is_some()));
        let now = self.engine(proposer).current_state().map(|s| s.isn);
        if done && now == Some(isn + 1) && self.both_idle() {
            Ok(())
        } else {
            Err(format!("update stalled: {:?} / {:?}", self.engines[0].phase(), self.engines[1].phase()))
        }
    }

    /// Steps until the channel funds are spent and confirmed.
    pub fn run_until_resolved(&mut self, max: u64) -> bool {
        self.run_until(max, |s| s.resolution().is_some())
    }
}
