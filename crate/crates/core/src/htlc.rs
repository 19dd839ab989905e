//! HTLC bookkeeping inside channel states and the on-chain claim/refund
//! spends of FinalizeExit's HTLC outputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Outpoint, Transaction, TxIn, TxOut};
use crate::channel::PeerRole;
use crate::crypto::{Digest20, Preimage, SigningKey};
use crate::script::{build_witness_for, OutputLock, SpendMaterial, SpendPath};
use crate::txgraph::StateSnapshot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HtlcDirection {
    AliceToBob,
    BobToAlice,
}

impl HtlcDirection {
    pub fn sender(self) -> PeerRole {
        match self {
            HtlcDirection::AliceToBob => PeerRole::Alice,
            HtlcDirection::BobToAlice => PeerRole::Bob,
        }
    }

    pub fn receiver(self) -> PeerRole {
        self.sender().other()
    }

    pub fn from_sender(sender: PeerRole) -> HtlcDirection {
        match sender {
            PeerRole::Alice => HtlcDirection::AliceToBob,
            PeerRole::Bob => HtlcDirection::BobToAlice,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Htlc {
    pub id: u32,
    pub direction: HtlcDirection,
    pub amount: u64,
    pub payment_hash: Digest20,
    /// Absolute height from which the sender may refund.
    pub expiry: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HtlcError {
    #[error("sender balance {available} below {requested}")]
    InsufficientBalance { available: u64, requested: u64 },
    #[error("HTLC amount must be positive")]
    ZeroAmount,
    #[error("expiry {expiry} not after current height {height}")]
    ExpiryInPast { expiry: u32, height: u32 },
    #[error("no open HTLC with id {0}")]
    UnknownHtlc(u32),
    #[error("HTLC id {0} already open")]
    DuplicateId(u32),
    #[error("preimage does not match payment hash")]
    WrongPreimage,
}

fn balance_mut(s: &mut StateSnapshot, role: PeerRole) -> &mut u64 {
    match role {
        PeerRole::Alice => &mut s.a_bal,
        PeerRole::Bob => &mut s.b_bal,
    }
}

/// Locks `htlc.amount` out of the sender's balance.
pub fn add_htlc(state: &StateSnapshot, htlc: Htlc, height: u32) -> Result<StateSnapshot, HtlcError> {
    if htlc.amount == 0 {
        return Err(HtlcError::ZeroAmount);
    }
    if htlc.expiry <= height {
        return Err(HtlcError::ExpiryInPast { expiry: htlc.expiry, height });
    }
    if state.htlcs.iter().any(|h| h.id == htlc.id) {
        return Err(HtlcError::DuplicateId(htlc.id));
    }
    let mut next = state.clone();
    let bal = balance_mut(&mut next, htlc.direction.sender());
    if *bal < htlc.amount {
        return Err(HtlcError::InsufficientBalance { available: *bal, requested: htlc.amount });
    }
    *bal -= htlc.amount;
    next.htlcs.push(htlc);
    Ok(next)
}

fn take(state: &StateSnapshot, id: u32) -> Result<(StateSnapshot, Htlc), HtlcError> {
    let mut next = state.clone();
    let pos = next.htlcs.iter().position(|h| h.id == id).ok_or(HtlcError::UnknownHtlc(id))?;
    let h = next.htlcs.remove(pos);
    Ok((next, h))
}

/// Credits the receiver once the payment preimage is known.
pub fn settle_htlc(state: &StateSnapshot, id: u32, preimage: &Preimage) -> Result<StateSnapshot, HtlcError> {
    let (mut next, h) = take(state, id)?;
    if preimage.hash() != h.payment_hash {
        return Err(HtlcError::WrongPreimage);
    }
    *balance_mut(&mut next, h.direction.receiver()) += h.amount;
    Ok(next)
}

/// Returns the amount to the sender.
pub fn fail_htlc(state: &StateSnapshot, id: u32) -> Result<StateSnapshot, HtlcError> {
    let (mut next, h) = take(state, id)?;
    *balance_mut(&mut next, h.direction.sender()) += h.amount;
    Ok(next)
}

fn spend(outpoint: Outpoint, amount: u64, to: &OutputLock) -> Transaction {
    Transaction {
        inputs: vec![TxIn::new(outpoint)],
        outputs: vec![TxOut { amount, lock: to.clone() }],
        locktime: None,
    }
}

/// Receiver's spend of an HTLC output with the payment preimage.
pub fn claim_tx(outpoint: Outpoint, htlc: &Htlc, receiver: &SigningKey, preimage: Preimage, to: &OutputLock) -> Transaction {
    let mut tx = spend(outpoint, htlc.amount, to);
    let m = SpendMaterial {
        signature: Some(receiver.sign(&tx.sighash())),
        payment_preimage: Some(preimage),
        ..Default::default()
    };
    tx.inputs[0].witness = build_witness_for(SpendPath::HtlcClaim, &m).expect("claim material complete");
    tx
}

/// Sender's spend of an HTLC output once the expiry height is reached.
pub fn refund_tx(outpoint: Outpoint, htlc: &Htlc, sender: &SigningKey, to: &OutputLock) -> Transaction {
    let mut tx = spend(outpoint, htlc.amount, to);
    let m = SpendMaterial { signature: Some(sender.sign(&tx.sighash())), ..Default::default() };
    tx.inputs[0].witness = build_witness_for(SpendPath::HtlcRefund, &m).expect("refund material complete");
    tx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> StateSnapshot {
        StateSnapshot { isn: 3, esn: 3, a_bal: 60_000, b_bal: 40_000, htlcs: vec![], fee_reserve: 0 }
    }

    fn htlc(id: u32, amount: u64) -> Htlc {
        Htlc {
            id,
            direction: HtlcDirection::AliceToBob,
            amount,
            payment_hash: Preimage([id as u8; 32]).hash(),
            expiry: 100,
        }
    }

    #[test]
    fn add_deducts_sender_only() {
        let s = add_htlc(&state(), htlc(1, 5_000), 10).unwrap();
        assert_eq!((s.a_bal, s.b_bal), (55_000, 40_000));
        assert_eq!(s.htlcs.len(), 1);
        s.check(100_000).unwrap();
    }

    #[test]
    fn add_beyond_balance() {
        assert_eq!(
            add_htlc(&state(), htlc(1, 60_001), 10),
            Err(HtlcError::InsufficientBalance { available: 60_000, requested: 60_001 })
        );
    }

    #[test]
    fn settle_and_fail() {
        let s = add_htlc(&state(), htlc(1, 5_000), 10).unwrap();
        let s = add_htlc(&s, htlc(2, 1_000), 10).unwrap();
        assert_eq!(s.htlcs.len(), 2);
        assert_eq!(settle_htlc(&s, 1, &Preimage([9; 32])), Err(HtlcError::WrongPreimage));
        let settled = settle_htlc(&s, 1, &Preimage([1; 32])).unwrap();
        assert_eq!((settled.a_bal, settled.b_bal), (54_000, 45_000));
        let failed = fail_htlc(&s, 1).unwrap();
        assert_eq!((failed.a_bal, failed.b_bal), (59_000, 40_000));
        settled.check(100_000).unwrap();
        failed.check(100_000).unwrap();
    }
}
