//! Reading exit transactions back off the chain.

use crate::chain::{Chain, Outpoint, Transaction};
use crate::crypto::{OtsSignature, Preimage};
use crate::script::{Item, Witness};

use super::PeerRole;

/// Branch selector of a two-branch witness: `true` picks Bob.
fn branch(w: &Witness) -> Option<PeerRole> {
    w.items.iter().find_map(|i| match i {
        Item::Bool(true) => Some(PeerRole::Bob),
        Item::Bool(false) => Some(PeerRole::Alice),
        _ => None,
    })
}

/// A CommitExit seen on chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservedCommit {
    pub tx: Transaction,
    pub initiator: PeerRole,
    pub preimage: Preimage,
}

/// An AssertExitState seen on chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservedAssert {
    pub tx: Transaction,
    pub asserter: PeerRole,
    pub ots: OtsSignature,
    pub p_e: Option<Preimage>,
}

/// Interprets the spender of `unilateral` as a CommitExit. Cooperative
/// closes also spend that output but carry more than one input.
pub fn commit_exit_at(chain: &Chain, unilateral: &Outpoint) -> Option<ObservedCommit> {
    let txid = chain.spender(unilateral)?;
    let rec = chain.tx(&txid)?;
    if rec.tx.inputs.len() != 1 {
        return None;
    }
    let w = &rec.tx.inputs[0].witness;
    let preimage = w.preimages().next().cloned()?;
    Some(ObservedCommit { tx: rec.tx.clone(), initiator: branch(w)?, preimage })
}

/// Interprets the spender of `commit_out` as an AssertExitState, which is
/// the only spend of that output carrying a one-time signature.
pub fn assert_at(chain: &Chain, commit_out: &Outpoint) -> Option<ObservedAssert> {
    let txid = chain.spender(commit_out)?;
    let rec = chain.tx(&txid)?;
    let w = &rec.tx.inputs.first()?.witness;
    let ots = w.ots_signatures().next().cloned()?;
    Some(ObservedAssert { tx: rec.tx.clone(), asserter: branch(w)?, ots, p_e: w.preimages().next().cloned() })
}
