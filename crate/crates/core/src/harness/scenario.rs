//! Scenario files and the runner behind `otspc run`.
//!
//! A scenario is a JSON object:
//!
//! ```json
//! {
//!   "name": "fig2_cheat",
//!   "config": { "seed": 7, "level": 1, "alice_history": true },
//!   "tick_budget": 4000,
//!   "actions": [
//!     { "action": "pay", "actor": "alice", "amount": 1000, "repeat": 50 },
//!     { "action": "cheat_exit", "actor": "alice", "isn": 50 },
//!     { "action": "until_closed" }
//!   ],
//!   "expect": [
//!     { "check": "resolved_by", "kind": "punish_alice" },
//!     { "check": "payout", "who": "bob", "equals": 1000000 }
//!   ]
//! }
//! ```
//!
//! `config` takes any [`SimConfig`] field. Actions run in order; `pay`,
//! `close`, `wait` and `until_closed` block until done, the rest take effect
//! at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Sim, SimConfig};
use crate::channel::{PeerRole, UpdateOp};
use crate::crypto::{Digest, Preimage};
use crate::htlc::{Htlc, HtlcDirection};
use crate::txgraph::{PrivacyLevel, TxKind};

pub const SCENARIO_DIR_ENV: &str = "OTSPC_SCENARIO_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Alice,
    Bob,
    TowerAlice,
    TowerBob,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Pay {
        actor: PeerRole,
        amount: u64,
        #[serde(default = "one")]
        repeat: u32,
    },
    /// `actor` offers an HTLC to the other owner, expiring `expiry_in`
    /// blocks from now.
    AddHtlc { actor: PeerRole, id: u32, amount: u64, expiry_in: u32 },
    /// The receiver settles off-chain with the preimage.
    SettleHtlc { actor: PeerRole, id: u32 },
    FailHtlc { actor: PeerRole, id: u32 },
    /// Hands the preimage of HTLC `id` to `actor` for an on-chain claim.
    RevealPreimage { actor: PeerRole, id: u32 },
    StallAtStep { actor: PeerRole, step: u8 },
    CheatExit {
        actor: PeerRole,
        isn: u32,
        #[serde(default = "yes")]
        assert: bool,
    },
    UnilateralExit { actor: PeerRole },
    Close { actor: PeerRole, fee: u64 },
    Offline { actor: PeerRole, ticks: u64 },
    /// `client`'s tower publishes the oldest pair it kept.
    ColludeTower { client: PeerRole },
    Mine { blocks: u32 },
    Wait { ticks: u64 },
    UntilClosed,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expect {
    Payout {
        who: Party,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        equals: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<u64>,
    },
    ResolvedBy { kind: TxKind },
    Published {
        kind: TxKind,
        #[serde(default = "yes")]
        present: bool,
    },
    Unresolved,
    /// Number of actions that failed, for scenarios that provoke a failure.
    ActionErrors { count: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub config: SimConfig,
    #[serde(default = "default_budget")]
    pub tick_budget: u64,
    pub actions: Vec<Action>,
    #[serde(default)]
    pub expect: Vec<Expect>,
}

fn default_budget() -> u64 {
    5_000
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("simulation setup failed: {0}")]
    Setup(String),
    #[error("assertions failed: {0:?}")]
    AssertionFailed(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub level: PrivacyLevel,
    pub ticks: u64,
    pub height: u32,
    pub payouts: Vec<(Party, u64)>,
    pub fees: u64,
    pub published: Vec<(Digest, Option<TxKind>)>,
    pub resolution: Option<(Digest, Option<TxKind>)>,
    pub action_errors: Vec<String>,
    pub violations: Vec<String>,
    pub assertions: Vec<AssertionResult>,
    pub log: Vec<String>,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        let mut v: Vec<String> =
            self.assertions.iter().filter(|a| !a.passed).map(|a| format!("{}: {}", a.check, a.detail)).collect();
        v.extend(self.violations.iter().cloned());
        v
    }
}

/// Default directory for bundled scenarios; overridden by the environment.
pub fn scenario_dir() -> PathBuf {
    std::env::var_os(SCENARIO_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios"))
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_owned(), source })?;
    Ok(serde_json::from_str(&text)?)
}

/// `path` itself if it exists, else the bare name inside [`scenario_dir`].
pub fn find_scenario(path: &Path) -> PathBuf {
    if path.exists() {
        path.to_owned()
    } else {
        scenario_dir().join(path).with_extension("json")
    }
}

pub fn run_file(path: &Path) -> Result<SimReport, ScenarioError> {
    run(&load_scenario(&find_scenario(path))?)
}

fn htlc_preimage(seed: u64, id: u32) -> Preimage {
    let mut b = seed.to_le_bytes().to_vec();
    b.extend(id.to_le_bytes());
    Preimage::derive("scenario/htlc", &b)
}

struct Runner {
    sim: Sim,
    errors: Vec<String>,
}

impl Runner {
    fn act(&mut self, a: &Action, budget: u64) {
        let sim = &mut self.sim;
        let seed = sim.cfg.seed;
        let res: Result<(), String> = match a {
            Action::Pay { actor, amount, repeat } => {
                (0..*repeat).try_for_each(|_| sim.pay(*actor, *amount))
            }
            Action::AddHtlc { actor, id, amount, expiry_in } => {
                let htlc = Htlc {
                    id: *id,
                    direction: HtlcDirection::from_sender(*actor),
                    amount: *amount,
                    payment_hash: htlc_preimage(seed, *id).hash(),
                    expiry: sim.chain.height() + expiry_in,
                };
                sim.update(*actor, vec![UpdateOp::AddHtlc { htlc }])
            }
            Action::SettleHtlc { actor, id } => {
                sim.update(*actor, vec![UpdateOp::SettleHtlc { id: *id, preimage: htlc_preimage(seed, *id) }])
            }
            Action::FailHtlc { actor, id } => sim.update(*actor, vec![UpdateOp::FailHtlc { id: *id }]),
            Action::RevealPreimage { actor, id } => {
                sim.engine_mut(*actor).learn_preimage(htlc_preimage(seed, *id));
                Ok(())
            }
            Action::StallAtStep { actor, step } => {
                sim.engine_mut(*actor).halt_after(*step);
                Ok(())
            }
            Action::CheatExit { actor, isn, assert } => {
                sim.with_engine(*actor, |e, c| e.exit_with_state(*isn, *assert, c)).map_err(|e| e.to_string())
            }
            Action::UnilateralExit { actor } => {
                sim.with_engine(*actor, |e, c| e.unilateral_exit(c)).map_err(|e| e.to_string())
            }
            Action::Close { actor, fee } => match sim.engine_mut(*actor).cooperative_close(*fee) {
                Ok(()) => {
                    sim.run_until(budget, |s| s.resolution().is_some() || !s.engine(*actor).is_idle() && s.engine(*actor).phase() != &crate::channel::ProtocolPhase::CoopClosing);
                    Ok(())
                }
                Err(e) => Err(e.to_string()),
            },
            Action::Offline { actor, ticks } => {
                sim.set_offline(*actor, *ticks);
                Ok(())
            }
            Action::ColludeTower { client } => {
                sim.betray(*client).map(|_| ()).ok_or_else(|| "tower has nothing to betray with".to_string())
            }
            Action::Mine { blocks } => {
                sim.mine(*blocks);
                Ok(())
            }
            Action::Wait { ticks } => {
                sim.run_ticks(*ticks);
                Ok(())
            }
            Action::UntilClosed => {
                if sim.run_until_resolved(budget) {
                    // let dependent spends (claims, refunds) land
                    sim.run_ticks(2);
                    Ok(())
                } else {
                    Err("channel not resolved within budget".into())
                }
            }
        };
        if let Err(e) = res {
            self.errors.push(format!("tick {}: {a:?}: {e}", self.sim.now()));
        }
    }
}

fn check(sim: &Sim, errors: &[String], e: &Expect) -> AssertionResult {
    let (passed, detail) = match e {
        Expect::Payout { who, equals, min, max } => {
            let v = sim.payout(*who);
            let ok = equals.is_none_or(|x| v == x) && min.is_none_or(|x| v >= x) && max.is_none_or(|x| v <= x);
            (ok, format!("{who:?} received {v}"))
        }
        Expect::ResolvedBy { kind } => {
            let r = sim.resolution();
            (r.is_some_and(|(_, k)| k == Some(*kind)), format!("resolution {r:?}"))
        }
        Expect::Published { kind, present } => {
            let seen = sim.chain.txids().iter().any(|t| sim.kind_of(t) == Some(*kind));
            (seen == *present, format!("{kind:?} published: {seen}"))
        }
        Expect::Unresolved => {
            let r = sim.resolution();
            (r.is_none(), format!("resolution {r:?}"))
        }
        Expect::ActionErrors { count } => (errors.len() == *count, format!("{} action errors", errors.len())),
    };
    AssertionResult { check: serde_json::to_string(e).expect("serializable"), passed, detail }
}

/// Runs a scenario to completion. Deterministic for a fixed scenario.
pub fn run(sc: &Scenario) -> Result<SimReport, ScenarioError> {
    let mut cfg = sc.config.clone();
    for a in &sc.actions {
        if let Action::CheatExit { actor, .. } = a {
            match actor {
                PeerRole::Alice => cfg.alice_history = true,
                PeerRole::Bob => cfg.bob_history = true,
            }
        }
    }
    let sim = Sim::new(cfg).map_err(|e| ScenarioError::Setup(e.to_string()))?;
    let mut r = Runner { sim, errors: Vec::new() };
    r.sim.open().map_err(ScenarioError::Setup)?;
    for a in &sc.actions {
        let left = sc.tick_budget.saturating_sub(r.sim.now());
        if left == 0 {
            r.errors.push("tick budget exhausted".into());
            break;
        }
        r.act(a, left);
    }
    let sim = &r.sim;
    let assertions = sc.expect.iter().map(|e| check(sim, &r.errors, e)).collect();
    let mut violations = sim.violations().to_vec();
    if let Err(e) = sim.chain.audit() {
        violations.push(format!("final chain audit: {e}"));
    }
    let minted = sim.chain.minted();
    if sim.chain.total_unspent() + sim.chain.fees() != minted {
        violations.push(format!("value not conserved: {} + {} != {minted}", sim.chain.total_unspent(), sim.chain.fees()));
    }
    let parties = [Party::Alice, Party::Bob, Party::TowerAlice, Party::TowerBob];
    Ok(SimReport {
        scenario: sc.name.clone(),
        seed: sc.config.seed,
        level: sc.config.level,
        ticks: sim.now(),
        height: sim.chain.height(),
        payouts: parties.iter().map(|p| (*p, sim.payout(*p))).collect(),
        fees: sim.chain.fees(),
        published: sim.chain.txids().iter().map(|t| (*t, sim.kind_of(t))).collect(),
        resolution: sim.resolution(),
        action_errors: r.errors.clone(),
        violations,
        assertions,
        log: sim.log().to_vec(),
    })
}
