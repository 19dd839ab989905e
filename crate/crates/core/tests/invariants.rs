use proptest::prelude::*;
use sha2::{Digest as _, Sha256};

use otspc_core::channel::PeerRole::{self, Alice, Bob};
use otspc_core::crypto::{derive_from, Digest, HashChain};
use otspc_core::harness::{Party, Sim, SimConfig};
use otspc_core::txgraph::{PrivacyLevel, TxKind};
use otspc_core::watchtower::TowerMode;

const I_BAL: u64 = 1_000_000;
const FEE_TOL: u64 = 3_000;

fn level() -> impl Strategy<Value = PrivacyLevel> {
    prop_oneof![Just(PrivacyLevel::L1), Just(PrivacyLevel::L2), Just(PrivacyLevel::L3)]
}

fn role() -> impl Strategy<Value = PeerRole> {
    prop_oneof![Just(Alice), Just(Bob)]
}

fn payments() -> impl Strategy<Value = Vec<(PeerRole, u64)>> {
    prop::collection::vec((role(), 1u64..20_000), 1..12)
}

fn sim(seed: u64, level: PrivacyLevel, history: bool) -> Sim {
    let cfg = SimConfig {
        seed,
        level,
        alice_tower: Some(TowerMode::Honest),
        bob_tower: Some(TowerMode::Honest),
        alice_history: history,
        bob_history: history,
        ..Default::default()
    };
    let mut s = Sim::new(cfg).unwrap();
    s.open().unwrap();
    s
}

fn party(r: PeerRole) -> Party {
    match r {
        Alice => Party::Alice,
        Bob => Party::Bob,
    }
}

proptest! {
    #[test]
    fn chain_steps_down_by_one_hash(seed in any::<[u8; 32]>(), len in 1u32..400, pick in any::<u32>()) {
        let c = HashChain::new(Digest(seed), len).unwrap();
        let i = 1 + pick % len;
        let lower: [u8; 32] = Sha256::digest(c.derive(i).unwrap().0).into();
        prop_assert_eq!(c.derive(i - 1).unwrap(), Digest(lower));
        let j = pick % (i + 1);
        prop_assert_eq!(derive_from(c.derive(i).unwrap(), i, j).unwrap(), c.derive(j).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn updates_keep_value_and_order(seed in 1u64..1_000, level in level(), pays in payments(), exiter in role()) {
        let mut s = sim(seed, level, false);
        let (mut isn, mut esn) = (0, 0);
        let (mut a, mut b) = (500_000u64, 500_000u64);
        for (payer, amount) in pays {
            s.pay(payer, amount).unwrap();
            match payer {
                Alice => (a, b) = (a - amount, b + amount),
                Bob => (a, b) = (a + amount, b - amount),
            }
            for r in [Alice, Bob] {
                let st = s.engine(r).current_state().unwrap();
                prop_assert_eq!(st.isn, isn + 1);
                prop_assert!(st.esn > esn, "esn {} after {}", st.esn, esn);
                prop_assert_eq!((st.a_bal, st.b_bal), (a, b));
            }
            let st = s.engine(Alice).current_state().unwrap();
            (isn, esn) = (st.isn, st.esn);
        }
        s.with_engine(exiter, |e, c| e.unilateral_exit(c)).unwrap();
        prop_assert!(s.run_until_resolved(300));
        s.run_ticks(2);
        prop_assert_eq!(s.resolution().unwrap().1, Some(TxKind::FinalizeExit));
        let (pa, pb) = (s.payout(Party::Alice), s.payout(Party::Bob));
        prop_assert!(pa <= a + FEE_TOL && pa + FEE_TOL >= a, "alice {} for {}", pa, a);
        prop_assert!(pb <= b + FEE_TOL && pb + FEE_TOL >= b, "bob {} for {}", pb, b);
        prop_assert!(s.violations().is_empty(), "{:?}", s.violations());
    }

    #[test]
    fn any_stale_exit_is_punished(seed in 1u64..1_000, level in level(), pays in payments(), cheater in role(), pick in any::<u32>()) {
        let mut s = sim(seed, level, true);
        let n = pays.len() as u32;
        for (payer, amount) in pays {
            s.pay(payer, amount).unwrap();
        }
        let j = pick % n;
        s.with_engine(cheater, |e, c| e.exit_with_state(j, true, c)).unwrap();
        prop_assert!(s.run_until_resolved(300));
        s.run_ticks(2);
        let victim = party(cheater.other());
        let got = s.payout(victim);
        prop_assert!(got + FEE_TOL >= I_BAL && got <= I_BAL, "victim got {}", got);
        prop_assert_eq!(s.payout(party(cheater)), 0);
        prop_assert!(s.violations().is_empty(), "{:?}", s.violations());
    }
}
