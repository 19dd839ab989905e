//! Exit incentives under asymmetric exits, and how long a sequence-number
//! space lasts.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::PeerRole;

pub type Amount = Ratio<i128>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("rate must be positive")]
    Rate,
    #[error("value_bits must be in 1..=63")]
    Bits,
}

/// Opportunity cost of delayed funds `p`, unilateral path fees `u` and
/// cooperative close fee `c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitPayoffs {
    pub p: Amount,
    pub u: Amount,
    pub c: Amount,
}

impl ExitPayoffs {
    pub fn new(p: i128, u: i128, c: i128) -> Result<ExitPayoffs, AnalysisError> {
        for (v, n) in [(p, "p"), (u, "u"), (c, "c")] {
            if v < 0 {
                return Err(AnalysisError::Negative(n));
            }
        }
        Ok(ExitPayoffs { p: Ratio::from_integer(p), u: Ratio::from_integer(u), c: Ratio::from_integer(c) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitAction {
    Cooperate,
    Defect,
}

impl ExitAction {
    pub const ALL: [ExitAction; 2] = [ExitAction::Cooperate, ExitAction::Defect];

    fn idx(self) -> usize {
        self as usize
    }
}

/// `cells[alice][bob] = (alice payoff, bob payoff)`; costs are negative.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PayoffMatrix {
    pub cells: [[(Amount, Amount); 2]; 2],
}

impl PayoffMatrix {
    pub fn get(&self, alice: ExitAction, bob: ExitAction) -> (Amount, Amount) {
        self.cells[alice.idx()][bob.idx()]
    }

    fn payoff(&self, player: PeerRole, mine: ExitAction, theirs: ExitAction) -> Amount {
        match player {
            PeerRole::Alice => self.get(mine, theirs).0,
            PeerRole::Bob => self.get(theirs, mine).1,
        }
    }
}

pub fn payoff_matrix(x: &ExitPayoffs) -> PayoffMatrix {
    let two = Ratio::from_integer(2);
    let zero = Ratio::from_integer(0);
    let coop = -x.c / two;
    let stuck = -(x.p + x.u);
    let both = stuck / two;
    PayoffMatrix { cells: [[(coop, coop), (stuck, zero)], [(zero, stuck), (both, both)]] }
}

/// Mutual cooperation beats mutual defection for both while defecting pays
/// individually: holds exactly when `p + u > c`.
pub fn is_prisoners_dilemma(x: &ExitPayoffs) -> bool {
    x.p + x.u > x.c
}

/// The strictly better reply of `player` to `opponent`, or `None` when both
/// replies pay the same.
pub fn best_response(m: &PayoffMatrix, player: PeerRole, opponent: ExitAction) -> Option<ExitAction> {
    let c = m.payoff(player, ExitAction::Cooperate, opponent);
    let d = m.payoff(player, ExitAction::Defect, opponent);
    match c.cmp(&d) {
        std::cmp::Ordering::Less => Some(ExitAction::Defect),
        std::cmp::Ordering::Greater => Some(ExitAction::Cooperate),
        std::cmp::Ordering::Equal => None,
    }
}

/// All pure-strategy profiles `(alice, bob)` where neither player gains by
/// deviating alone.
pub fn nash_equilibria(m: &PayoffMatrix) -> Vec<(ExitAction, ExitAction)> {
    equilibria(m, false)
}

/// Profiles where every unilateral deviation strictly loses.
pub fn strict_nash_equilibria(m: &PayoffMatrix) -> Vec<(ExitAction, ExitAction)> {
    equilibria(m, true)
}

fn equilibria(m: &PayoffMatrix, strict: bool) -> Vec<(ExitAction, ExitAction)> {
    let holds = |alt: Amount, cur: Amount| if strict { alt < cur } else { alt <= cur };
    let mut out = Vec::new();
    for a in ExitAction::ALL {
        for b in ExitAction::ALL {
            let (pa, pb) = m.get(a, b);
            let a_ok = ExitAction::ALL.iter().filter(|&&a2| a2 != a).all(|&a2| holds(m.get(a2, b).0, pa));
            let b_ok = ExitAction::ALL.iter().filter(|&&b2| b2 != b).all(|&b2| holds(m.get(a, b2).1, pb));
            if a_ok && b_ok {
                out.push((a, b));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Capacity {
    pub max_updates: u64,
    pub days: f64,
    pub years: f64,
}

pub fn capacity(value_bits: u32, updates_per_second: f64) -> Result<Capacity, AnalysisError> {
    if !(1..=63).contains(&value_bits) {
        return Err(AnalysisError::Bits);
    }
    if updates_per_second.is_nan() || updates_per_second <= 0.0 {
        return Err(AnalysisError::Rate);
    }
    let max_updates = 1u64 << value_bits;
    let days = max_updates as f64 / (updates_per_second * 86_400.0);
    Ok(Capacity { max_updates, days, years: days / 365.0 })
}
