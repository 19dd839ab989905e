//! Internal and external sequence numbers.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ChannelError;

/// Default bound on random ESN gaps.
pub const DEFAULT_D: u32 = 16;

/// States whose punishment material is reported to towers (`J_q`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum ReportSchedule {
    #[default]
    All,
    Every(u32),
    Explicit(BTreeSet<u32>),
}


impl ReportSchedule {
    pub fn contains(&self, j: u32) -> bool {
        match self {
            ReportSchedule::All => true,
            ReportSchedule::Every(n) => *n > 0 && j.is_multiple_of(*n),
            ReportSchedule::Explicit(s) => s.contains(&j),
        }
    }

    /// Whether `d(j)` is drawn at random rather than fixed to 1.
    pub fn randomized(&self, j: u32) -> bool {
        self.contains(j) || j.checked_add(1).is_some_and(|n| self.contains(n))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceManager {
    pub isn: u32,
    pub esn: u32,
    pub schedule: ReportSchedule,
    pub d_max: u32,
    pub max_esn: u32,
}

impl SequenceManager {
    pub fn new(schedule: ReportSchedule, d_max: u32, value_bits: u32) -> SequenceManager {
        let max_esn = if value_bits >= 32 { u32::MAX } else { (1u32 << value_bits) - 1 };
        SequenceManager { isn: 0, esn: 0, schedule, d_max: d_max.max(1), max_esn }
    }

    pub fn gap<R: Rng>(&self, j: u32, rng: &mut R) -> u32 {
        if self.schedule.randomized(j) {
            rng.gen_range(1..=self.d_max)
        } else {
            1
        }
    }

    /// Whether `d` is a gap the schedule allows at `j`.
    pub fn gap_allowed(&self, j: u32, d: u32) -> bool {
        if self.schedule.randomized(j) {
            (1..=self.d_max).contains(&d)
        } else {
            d == 1
        }
    }

    /// `esn(0) = d(0)`.
    pub fn initial<R: Rng>(&mut self, rng: &mut R) -> u32 {
        self.isn = 0;
        self.esn = self.gap(0, rng);
        self.esn
    }

    /// The esn the next state would carry.
    pub fn next_esn<R: Rng>(&self, rng: &mut R) -> Result<u32, ChannelError> {
        let j = self.isn + 1;
        self.esn
            .checked_add(self.gap(j, rng))
            .filter(|e| *e <= self.max_esn)
            .ok_or(ChannelError::EsnOverflow { esn: self.esn })
    }

    /// Checks a counterparty-proposed esn for state `isn + 1`.
    pub fn check_next(&self, esn: u32) -> Result<(), ChannelError> {
        let ok = esn > self.esn && esn <= self.max_esn && self.gap_allowed(self.isn + 1, esn - self.esn);
        if ok {
            Ok(())
        } else {
            Err(ChannelError::BadEsn { previous: self.esn, proposed: esn })
        }
    }

    pub fn commit(&mut self, isn: u32, esn: u32) {
        self.isn = isn;
        self.esn = esn;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unreported_states_step_by_one() {
        let s = SequenceManager::new(ReportSchedule::Explicit([10].into()), 16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(s.gap(3, &mut rng), 1);
        assert!(s.schedule.randomized(9));
        assert!(s.schedule.randomized(10));
        assert!(!s.schedule.randomized(11));
    }

    #[test]
    fn reported_gaps_stay_in_range() {
        let s = SequenceManager::new(ReportSchedule::All, 16, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for j in 0..500 {
            let d = s.gap(j, &mut rng);
            assert!((1..=16).contains(&d));
        }
    }

    #[test]
    fn overflow_near_limit() {
        let mut s = SequenceManager::new(ReportSchedule::Every(0), 16, 32);
        s.commit(7, u32::MAX - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(s.next_esn(&mut rng).unwrap(), u32::MAX);
        s.commit(8, u32::MAX);
        assert_eq!(s.next_esn(&mut rng), Err(ChannelError::EsnOverflow { esn: u32::MAX }));
    }

    #[test]
    fn counterparty_esn_checked() {
        let mut s = SequenceManager::new(ReportSchedule::Every(0), 16, 32);
        s.commit(4, 20);
        assert!(s.check_next(21).is_ok());
        assert!(s.check_next(22).is_err());
        assert!(s.check_next(20).is_err());
    }
}
