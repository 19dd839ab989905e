//! Signature custody: aggregated covenant signatures per template, and the
//! constant-size punishment store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::chain::Transaction;
use crate::crypto::{CovenantSignature, OtsPublicKey, OtsSignature, COVENANT_SIG_LEN};
use crate::script::{OutputLock, ScriptError, ScriptOp, SpendMaterial, SpendPath};
use crate::txgraph::{PunishPair, Template, TxKind};

/// Aggregated covenant signatures indexed by template kind and path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SigBook(pub BTreeMap<TxKind, BTreeMap<u8, CovenantSignature>>);

impl SigBook {
    pub fn insert(&mut self, kind: TxKind, path: u8, sig: CovenantSignature) {
        self.0.entry(kind).or_default().insert(path, sig);
    }

    pub fn get(&self, kind: TxKind, path: u8) -> Option<&CovenantSignature> {
        self.0.get(&kind)?.get(&path)
    }

    /// Whether every covenant path of `t` is signed.
    pub fn covers(&self, t: &Template) -> bool {
        t.covenant_paths().iter().all(|p| self.get(t.kind, *p).is_some())
    }

    pub fn covers_all(&self, ts: &[&Template]) -> bool {
        ts.iter().all(|t| self.covers(t))
    }
}

/// Fills every input witness of `t`. `overrides` replaces the default path
/// of an input; `material` supplies everything but the covenant signature.
pub fn complete(
    t: &Template,
    sigs: &SigBook,
    material: &SpendMaterial,
    overrides: &[(usize, SpendPath)],
) -> Result<Transaction, ScriptError> {
    let mut t = t.clone();
    for i in 0..t.spends.len() {
        let path = overrides.iter().find(|(j, _)| *j == i).map(|(_, p)| *p).unwrap_or(t.spends[i]);
        let mut m = material.clone();
        m.covenant = path.covenant_path().and_then(|p| sigs.get(t.kind, p)).copied();
        t.set_witness(i, path, &m)?;
    }
    Ok(t.tx)
}

/// A CommitPunish/Punish pair with both covenant signatures, ready to be
/// broadcast once the cheater's one-time signature is scraped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPair {
    pub commit: Template,
    pub commit_sig: CovenantSignature,
    pub punish: Template,
    pub punish_sig: CovenantSignature,
}

impl SignedPair {
    pub fn from_book(pair: &PunishPair, book: &SigBook) -> Option<SignedPair> {
        Some(SignedPair {
            commit_sig: *book.get(pair.commit.kind, 0)?,
            punish_sig: *book.get(pair.punish.kind, 0)?,
            commit: pair.commit.clone(),
            punish: pair.punish.clone(),
        })
    }

    pub fn threshold(&self) -> Option<u32> {
        PunishPair { commit: self.commit.clone(), punish: self.punish.clone() }.threshold()
    }

    /// The one-time key the punish script checks.
    pub fn cheater_key(&self) -> Option<&OtsPublicKey> {
        match &self.commit.tx.outputs.first()?.lock {
            OutputLock::ScriptHash(s) => s.ops().iter().find_map(|op| match op {
                ScriptOp::OtCSigV(keys) => keys.first(),
                _ => None,
            }),
            _ => None,
        }
    }

    /// Whether `(value, sig)` scraped from an assert is punishable here.
    pub fn punishes(&self, value: u32, sig: &OtsSignature) -> bool {
        match (self.threshold(), self.cheater_key()) {
            (Some(thr), Some(k)) => value < thr && k.verify(value, sig),
            _ => false,
        }
    }

    pub fn commit_tx(&self) -> Transaction {
        let mut book = SigBook::default();
        book.insert(self.commit.kind, 0, self.commit_sig);
        complete(&self.commit, &book, &SpendMaterial::default(), &[]).expect("covenant witness")
    }

    pub fn punish_tx(&self, ots: &OtsSignature) -> Transaction {
        let mut book = SigBook::default();
        book.insert(self.punish.kind, 0, self.punish_sig);
        let m = SpendMaterial { ots: Some(ots.clone()), ..Default::default() };
        complete(&self.punish, &book, &m, &[]).expect("punish witness")
    }

    /// Canonical fixed-width size: both transactions plus both signatures.
    pub fn byte_size(&self) -> usize {
        self.commit.tx.serialize().len() + self.punish.tx.serialize().len() + 2 * COVENANT_SIG_LEN
    }
}

/// What an owner keeps to punish the counterparty: the pair from the latest
/// fully revoked state, and the matching tower pair when towers have their
/// own outputs. Replaced wholesale on every update.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PunishStore {
    pub own: Option<SignedPair>,
    pub tower: Option<SignedPair>,
}

impl PunishStore {
    pub fn threshold(&self) -> Option<u32> {
        self.own.as_ref().and_then(|p| p.threshold())
    }

    pub fn byte_size(&self) -> usize {
        self.own.as_ref().map_or(0, |p| p.byte_size()) + self.tower.as_ref().map_or(0, |p| p.byte_size())
    }
}
