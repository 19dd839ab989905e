//! Simulated UTXO chain: validation at submission, first-seen mempool,
//! in-order mining and a JSON-lines event log.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{tagged_hash, Digest, KeyRegistry};
use crate::encoding::Encoder;
use crate::script::{execute, ExecContext, FailureKind, OutputLock, ScriptError, ScriptFailure, Witness};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Outpoint {
    pub txid: Digest,
    pub index: u32,
}

impl Outpoint {
    pub fn new(txid: Digest, index: u32) -> Outpoint {
        Outpoint { txid, index }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxIn {
    pub prevout: Outpoint,
    pub witness: Witness,
    /// The signature digest ignores this input's prevout txid, so one
    /// signature covers the same spend of any output with the same lock
    /// (how a single presigned Expire can answer any stale CommitExit).
    #[serde(default)]
    pub floating: bool,
}

impl TxIn {
    pub fn new(prevout: Outpoint) -> TxIn {
        TxIn { prevout, witness: Witness::default(), floating: false }
    }

    pub fn floating(prevout: Outpoint) -> TxIn {
        TxIn { prevout, witness: Witness::default(), floating: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxOut {
    pub amount: u64,
    pub lock: OutputLock,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Transaction {
    pub inputs: Vec<TxIn>,
    pub outputs: Vec<TxOut>,
    pub locktime: Option<u32>,
}

impl Transaction {
    fn encode_base(&self, e: &mut Encoder, for_signing: bool) {
        e.u32(self.inputs.len() as u32);
        for i in &self.inputs {
            if for_signing && i.floating {
                e.digest(&Digest::ZERO);
            } else {
                e.digest(&i.prevout.txid);
            }
            e.u32(i.prevout.index).u8(i.floating as u8);
        }
        e.u32(self.outputs.len() as u32);
        for o in &self.outputs {
            e.u64(o.amount);
            o.lock.encode(e);
        }
        e.u32(self.locktime.unwrap_or(0));
    }

    /// Hash of the serialization without witnesses.
    pub fn txid(&self) -> Digest {
        let mut e = Encoder::new();
        self.encode_base(&mut e, false);
        tagged_hash("tx/id", &[&e.finish()])
    }

    /// Digest every signature on this transaction commits to.
    pub fn sighash(&self) -> Digest {
        let mut e = Encoder::new();
        self.encode_base(&mut e, true);
        tagged_hash("tx/sighash", &[&e.finish()])
    }

    /// Full serialization including witnesses.
    pub fn serialize(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode_base(&mut e, false);
        for i in &self.inputs {
            i.witness.encode(&mut e);
        }
        e.finish()
    }

    pub fn outpoint(&self, index: u32) -> Outpoint {
        Outpoint::new(self.txid(), index)
    }

    pub fn output_total(&self) -> u64 {
        self.outputs.iter().map(|o| o.amount).sum()
    }

    pub fn op_return_payloads(&self) -> impl Iterator<Item = &[u8]> {
        self.outputs.iter().filter_map(|o| o.lock.op_return_payload())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utxo {
    pub amount: u64,
    pub lock: OutputLock,
    /// `None` while the creating transaction is in the mempool.
    pub conf_height: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxStatus {
    Pending,
    Confirmed(u32),
}

#[derive(Clone, Debug)]
pub struct TxRecord {
    pub tx: Transaction,
    pub status: TxStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize)]
pub enum Rejection {
    #[error("transaction has no inputs")]
    NoInputs,
    #[error("already known")]
    Duplicate,
    #[error("missing input {0:?}")]
    MissingInput(Outpoint),
    #[error("input {outpoint:?} already spent by {spender}")]
    Conflict { outpoint: Outpoint, spender: Digest },
    #[error("input {input}: relative timelock not matured")]
    SeqNotMatured { input: usize },
    #[error("input {input}: {failure}")]
    Script { input: usize, failure: ScriptFailure },
    #[error("input {input}: {reason}")]
    Reveal { input: usize, reason: String },
    #[error("outputs {outputs} exceed inputs {inputs}")]
    AmountOverflow { inputs: u64, outputs: u64 },
    #[error("locktime {0} not reached")]
    LockTimeNotReached(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("unknown transaction {0}")]
    UnknownTx(Digest),
    #[error("transaction has no input {0}")]
    NoSuchInput(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("confirmed tx {txid} spends unavailable {outpoint:?}")]
    BadSpend { txid: Digest, outpoint: Outpoint },
    #[error("value not conserved: minted {minted}, utxo {utxo}, fees {fees}")]
    Conservation { minted: u64, utxo: u64, fees: u64 },
    #[error("replayed UTXO set differs from live set")]
    UtxoMismatch,
}

/// One line of the chain log. Field order is part of the format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChainEvent {
    Mint { height: u32, txid: Digest, amount: u64 },
    Accepted { height: u32, txid: Digest },
    Rejected { height: u32, txid: Digest, reason: String },
    Block { height: u32, confirmed: Vec<Digest>, dropped: Vec<Digest> },
}

#[derive(Debug, Clone)]
pub struct Chain {
    height: u32,
    utxos: BTreeMap<Outpoint, Utxo>,
    txs: HashMap<Digest, TxRecord>,
    order: Vec<Digest>,
    mempool: Vec<Digest>,
    spent: HashMap<Outpoint, Digest>,
    registry: KeyRegistry,
    minted: u64,
    fees: u64,
    log: Vec<ChainEvent>,
    dropped: Vec<Digest>,
}

impl Chain {
    pub fn new(registry: KeyRegistry) -> Chain {
        Chain {
            height: 0,
            utxos: BTreeMap::new(),
            txs: HashMap::new(),
            order: Vec::new(),
            mempool: Vec::new(),
            spent: HashMap::new(),
            registry,
            minted: 0,
            fees: 0,
            log: Vec::new(),
            dropped: Vec::new(),
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    /// Creates coins out of nothing, confirmed at the current height. Test
    /// setup only; the conservation audit accounts for it.
    pub fn mint(&mut self, outputs: Vec<TxOut>) -> Digest {
        // A unique marker input keeps mint txids distinct.
        let marker = Outpoint::new(tagged_hash("mint", &[&(self.order.len() as u64).to_le_bytes()]), u32::MAX);
        let tx = Transaction { inputs: vec![TxIn::new(marker)], outputs, locktime: None };
        let txid = tx.txid();
        let amount = tx.output_total();
        for (i, o) in tx.outputs.iter().enumerate() {
            let utxo = Utxo { amount: o.amount, lock: o.lock.clone(), conf_height: Some(self.height) };
            self.utxos.insert(Outpoint::new(txid, i as u32), utxo);
        }
        self.minted += amount;
        self.txs.insert(txid, TxRecord { tx, status: TxStatus::Confirmed(self.height) });
        self.order.push(txid);
        self.log.push(ChainEvent::Mint { height: self.height, txid, amount });
        txid
    }

    /// Validates against the current tip and, if valid, adds to the mempool.
    pub fn submit(&mut self, tx: Transaction) -> Result<Digest, Rejection> {
        let txid = tx.txid();
        let res = self.validate(&tx, &txid);
        match &res {
            Ok(()) => {
                self.accept(tx, txid);
                Ok(txid)
            }
            Err(r) => {
                if matches!(r, Rejection::Conflict { .. }) {
                    self.dropped.push(txid);
                }
                self.log.push(ChainEvent::Rejected { height: self.height, txid, reason: r.to_string() });
                Err(r.clone())
            }
        }
    }

    fn validate(&self, tx: &Transaction, txid: &Digest) -> Result<(), Rejection> {
        if tx.inputs.is_empty() {
            return Err(Rejection::NoInputs);
        }
        if self.txs.contains_key(txid) {
            return Err(Rejection::Duplicate);
        }
        if let Some(h) = tx.locktime {
            if self.height < h {
                return Err(Rejection::LockTimeNotReached(h));
            }
        }
        let sighash = tx.sighash();
        let mut total_in: u64 = 0;
        for (n, input) in tx.inputs.iter().enumerate() {
            let op = input.prevout;
            if let Some(spender) = self.spent.get(&op) {
                return Err(Rejection::Conflict { outpoint: op, spender: *spender });
            }
            if tx.inputs[..n].iter().any(|i| i.prevout == op) {
                return Err(Rejection::Conflict { outpoint: op, spender: *txid });
            }
            let utxo = self.utxos.get(&op).ok_or(Rejection::MissingInput(op))?;
            total_in = total_in.checked_add(utxo.amount).ok_or(Rejection::AmountOverflow {
                inputs: u64::MAX,
                outputs: tx.output_total(),
            })?;
            let script = utxo
                .lock
                .reveal(input.witness.leaf_index)
                .map_err(|e: ScriptError| Rejection::Reveal { input: n, reason: e.to_string() })?;
            let ctx = ExecContext {
                sighash,
                input_index: n as u32,
                height: self.height,
                confirmations: utxo.conf_height.map_or(0, |c| self.height - c),
                registry: &self.registry,
            };
            execute(script, &input.witness, &ctx).map_err(|failure| match failure.kind {
                FailureKind::SeqNotMatured => Rejection::SeqNotMatured { input: n },
                _ => Rejection::Script { input: n, failure },
            })?;
        }
        let total_out = tx
            .outputs
            .iter()
            .try_fold(0u64, |acc, o| acc.checked_add(o.amount))
            .unwrap_or(u64::MAX);
        if total_out > total_in {
            return Err(Rejection::AmountOverflow { inputs: total_in, outputs: total_out });
        }
        Ok(())
    }

    fn accept(&mut self, tx: Transaction, txid: Digest) {
        let mut total_in = 0;
        for i in &tx.inputs {
            let u = self.utxos.remove(&i.prevout).expect("validated input");
            total_in += u.amount;
            self.spent.insert(i.prevout, txid);
        }
        for (n, o) in tx.outputs.iter().enumerate() {
            self.utxos.insert(Outpoint::new(txid, n as u32), Utxo { amount: o.amount, lock: o.lock.clone(), conf_height: None });
        }
        self.fees += total_in - tx.output_total();
        self.txs.insert(txid, TxRecord { tx, status: TxStatus::Pending });
        self.mempool.push(txid);
        self.order.push(txid);
        self.log.push(ChainEvent::Accepted { height: self.height, txid });
    }

    /// Mines `n` blocks; the first one confirms the whole mempool in
    /// submission order.
    pub fn mine_blocks(&mut self, n: u32) -> u32 {
        for b in 0..n {
            self.height += 1;
            let confirmed = if b == 0 { std::mem::take(&mut self.mempool) } else { Vec::new() };
            for txid in &confirmed {
                let rec = self.txs.get_mut(txid).expect("mempool tx recorded");
                rec.status = TxStatus::Confirmed(self.height);
                for i in 0..rec.tx.outputs.len() {
                    if let Some(u) = self.utxos.get_mut(&Outpoint::new(*txid, i as u32)) {
                        u.conf_height = Some(self.height);
                    }
                }
            }
            let dropped = std::mem::take(&mut self.dropped);
            self.log.push(ChainEvent::Block { height: self.height, confirmed, dropped });
        }
        self.height
    }

    pub fn tx(&self, txid: &Digest) -> Option<&TxRecord> {
        self.txs.get(txid)
    }

    pub fn status(&self, txid: &Digest) -> Option<TxStatus> {
        self.txs.get(txid).map(|r| r.status)
    }

    pub fn is_confirmed(&self, txid: &Digest) -> bool {
        matches!(self.status(txid), Some(TxStatus::Confirmed(_)))
    }

    /// Blocks on top of the one confirming `txid`.
    pub fn confirmations(&self, txid: &Digest) -> Option<u32> {
        match self.status(txid)? {
            TxStatus::Confirmed(h) => Some(self.height - h),
            TxStatus::Pending => None,
        }
    }

    /// Witness of input `input` exactly as published.
    pub fn observe_witness(&self, txid: &Digest, input: usize) -> Result<&Witness, ChainError> {
        let rec = self.txs.get(txid).ok_or(ChainError::UnknownTx(*txid))?;
        rec.tx.inputs.get(input).map(|i| &i.witness).ok_or(ChainError::NoSuchInput(input))
    }

    /// Transaction (pending or confirmed) spending `op`.
    pub fn spender(&self, op: &Outpoint) -> Option<Digest> {
        self.spent.get(op).copied()
    }

    pub fn utxo(&self, op: &Outpoint) -> Option<&Utxo> {
        self.utxos.get(op)
    }

    pub fn is_unspent(&self, op: &Outpoint) -> bool {
        self.utxos.contains_key(op)
    }

    /// Every transaction in acceptance order.
    pub fn txids(&self) -> &[Digest] {
        &self.order
    }

    pub fn mempool(&self) -> &[Digest] {
        &self.mempool
    }

    /// Confirmed value held by outputs with exactly this lock.
    pub fn balance_of(&self, lock: &OutputLock) -> u64 {
        self.utxos
            .values()
            .filter(|u| u.conf_height.is_some() && &u.lock == lock)
            .map(|u| u.amount)
            .sum()
    }

    pub fn total_unspent(&self) -> u64 {
        self.utxos.values().map(|u| u.amount).sum()
    }

    pub fn minted(&self) -> u64 {
        self.minted
    }

    pub fn fees(&self) -> u64 {
        self.fees
    }

    pub fn events(&self) -> &[ChainEvent] {
        &self.log
    }

    pub fn event_log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Digest over height, UTXO set and transaction order.
    pub fn state_digest(&self) -> Digest {
        let mut e = Encoder::new();
        e.u32(self.height);
        for (op, u) in &self.utxos {
            e.digest(&op.txid).u32(op.index).u64(u.amount).digest(&u.lock.commitment());
            e.u32(u.conf_height.map_or(u32::MAX, |h| h));
        }
        for t in &self.order {
            e.digest(t);
        }
        tagged_hash("chain/state", &[&e.finish()])
    }

    /// Replays every transaction from scratch and checks no double spend,
    /// no spend of a missing output, and `minted = unspent + fees`.
    pub fn audit(&self) -> Result<(), AuditError> {
        let mut utxos: BTreeMap<Outpoint, u64> = BTreeMap::new();
        let mut minted = 0;
        let mut fees = 0;
        for txid in &self.order {
            let tx = &self.txs[txid].tx;
            let is_mint = tx.inputs.len() == 1 && tx.inputs[0].prevout.index == u32::MAX;
            if is_mint {
                minted += tx.output_total();
            } else {
                let mut total_in = 0;
                for i in &tx.inputs {
                    total_in += utxos
                        .remove(&i.prevout)
                        .ok_or(AuditError::BadSpend { txid: *txid, outpoint: i.prevout })?;
                }
                fees += total_in - tx.output_total();
            }
            for (n, o) in tx.outputs.iter().enumerate() {
                utxos.insert(Outpoint::new(*txid, n as u32), o.amount);
            }
        }
        let live: BTreeMap<Outpoint, u64> = self.utxos.iter().map(|(k, v)| (*k, v.amount)).collect();
        if live != utxos {
            return Err(AuditError::UtxoMismatch);
        }
        let utxo: u64 = utxos.values().sum();
        if minted != utxo + fees || minted != self.minted || fees != self.fees {
            return Err(AuditError::Conservation { minted, utxo, fees });
        }
        Ok(())
    }
}
