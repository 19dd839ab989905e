//! Python bindings: scenario runs, the exit payoff table, capacity and
//! weight figures, and a small handle on a live simulation.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use otspc_core::analysis::{self, ExitAction, ExitPayoffs};
use otspc_core::channel::PeerRole;
use otspc_core::harness::{self, find_scenario, load_scenario, Party, Sim, SimConfig};
use otspc_core::txgraph::{exit_path_report, PrivacyLevel};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn role(name: &str) -> PyResult<PeerRole> {
    match name {
        "alice" => Ok(PeerRole::Alice),
        "bob" => Ok(PeerRole::Bob),
        _ => Err(PyValueError::new_err(format!("unknown owner {name:?}"))),
    }
}

fn party(name: &str) -> PyResult<Party> {
    serde_json::from_value(serde_json::Value::String(name.to_owned())).map_err(value_err)
}

/// Runs a scenario file (or bundled scenario name) and returns the report
/// as a JSON string.
#[pyfunction]
#[pyo3(signature = (path, seed=None, level=None))]
fn run_scenario(path: &str, seed: Option<u64>, level: Option<u8>) -> PyResult<String> {
    let mut sc = load_scenario(&find_scenario(Path::new(path))).map_err(value_err)?;
    if let Some(s) = seed {
        sc.config.seed = s;
    }
    if let Some(l) = level {
        sc.config.level = PrivacyLevel::try_from(l).map_err(value_err)?;
    }
    let report = harness::run(&sc).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&report).map_err(value_err)
}

/// Payoff cells as `{(alice, bob): (alice_payoff, bob_payoff)}` with
/// actions "cooperate"/"defect" and payoffs as floats, plus the verdict.
#[pyfunction]
fn payoff(p: i64, u: i64, c: i64) -> PyResult<(Vec<((String, String), (f64, f64))>, bool)> {
    let x = ExitPayoffs::new(p.into(), u.into(), c.into()).map_err(value_err)?;
    let m = analysis::payoff_matrix(&x);
    let f = |r: num_rational::Ratio<i128>| *r.numer() as f64 / *r.denom() as f64;
    let name = |a: ExitAction| format!("{a:?}").to_lowercase();
    let mut cells = Vec::new();
    for a in ExitAction::ALL {
        for b in ExitAction::ALL {
            let (pa, pb) = m.get(a, b);
            cells.push(((name(a), name(b)), (f(pa), f(pb))));
        }
    }
    Ok((cells, analysis::is_prisoners_dilemma(&x)))
}

/// `(max_updates, days, years)`.
#[pyfunction]
fn capacity(bits: u32, rate: f64) -> PyResult<(u64, f64, f64)> {
    let c = analysis::capacity(bits, rate).map_err(value_err)?;
    Ok((c.max_updates, c.days, c.years))
}

/// `[(transaction, weight)]` and the total.
#[pyfunction]
fn weights() -> (Vec<(String, u32)>, u32) {
    let r = exit_path_report();
    (r.txs.iter().map(|t| (format!("{:?}", t.kind), t.total)).collect(), r.total)
}

/// A running two-owner channel.
#[pyclass(unsendable)]
struct Simulation {
    sim: Sim,
}

#[pymethods]
impl Simulation {
    /// `config` is a JSON object with any simulator config field.
    #[new]
    #[pyo3(signature = (config="{}"))]
    fn new(config: &str) -> PyResult<Simulation> {
        let cfg: SimConfig = serde_json::from_str(config).map_err(value_err)?;
        let mut sim = Sim::new(cfg).map_err(value_err)?;
        sim.open().map_err(PyRuntimeError::new_err)?;
        Ok(Simulation { sim })
    }

    fn pay(&mut self, payer: &str, amount: u64) -> PyResult<()> {
        self.sim.pay(role(payer)?, amount).map_err(PyRuntimeError::new_err)
    }

    /// `(isn, a_bal, b_bal)` of the current state as `owner` sees it.
    fn state(&self, owner: &str) -> PyResult<(u32, u64, u64)> {
        let s = self.sim.engine(role(owner)?).current_state().ok_or_else(|| PyRuntimeError::new_err("channel closed"))?;
        Ok((s.isn, s.a_bal, s.b_bal))
    }

    fn unilateral_exit(&mut self, owner: &str) -> PyResult<()> {
        self.sim.with_engine(role(owner)?, |e, c| e.unilateral_exit(c)).map_err(value_err)
    }

    /// Exit with an older state; the owner must have kept its history.
    #[pyo3(signature = (owner, isn, assert_state=true))]
    fn exit_with_state(&mut self, owner: &str, isn: u32, assert_state: bool) -> PyResult<()> {
        self.sim.with_engine(role(owner)?, |e, c| e.exit_with_state(isn, assert_state, c)).map_err(value_err)
    }

    fn run_until_resolved(&mut self, max_ticks: u64) -> bool {
        self.sim.run_until_resolved(max_ticks)
    }

    fn run_ticks(&mut self, n: u64) {
        self.sim.run_ticks(n)
    }

    /// Kind of the confirmed transaction that spent the channel funds.
    fn resolution(&self) -> Option<String> {
        self.sim.resolution().map(|(_, k)| k.map_or("unknown".to_owned(), |k| format!("{k:?}")))
    }

    fn payout(&self, who: &str) -> PyResult<u64> {
        Ok(self.sim.payout(party(who)?))
    }

    fn violations(&self) -> Vec<String> {
        self.sim.violations().to_vec()
    }
}

#[pymodule]
fn otspc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(payoff, m)?)?;
    m.add_function(wrap_pyfunction!(capacity, m)?)?;
    m.add_function(wrap_pyfunction!(weights, m)?)?;
    m.add_class::<Simulation>()?;
    Ok(())
}
