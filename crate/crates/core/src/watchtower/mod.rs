//! Watchtowers for the three privacy levels. Each tower keeps one
//! fixed-size record per channel and punishes stale exits it sees on chain.

pub mod wire;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Chain, Outpoint, Transaction};
use crate::channel::observe::{assert_at, commit_exit_at};
use crate::channel::{PeerRole, SignedPair};
use crate::crypto::{decrypt, derive_from, CipherPacket, CovenantSignature, Digest, OtsSignature, Preimage, COVENANT_SIG_LEN};
use crate::script::Item;
use crate::txgraph::{build_punish_pair, parse_l3_payload, PrivacyLevel, PunishSpec, TxKind};

pub use wire::{
    decode_l3_key, encode_l3_key, pad_l2, unpad_l2, L2Payload, L3Registration, TowerMessage, TowerMsgKind,
    L2_PAYLOAD_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TowerError {
    #[error("malformed tower record: {0}")]
    Malformed(&'static str),
    #[error("channel {0:?} not registered")]
    UnknownChannel(Digest),
    #[error("record level {got:?} does not match registration {want:?}")]
    LevelMismatch { want: PrivacyLevel, got: PrivacyLevel },
    #[error("client data does not decrypt")]
    DecryptFailure,
    #[error("held key index {held} cannot reach {needed}")]
    StaleRecord { held: u32, needed: u32 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerMode {
    #[default]
    Honest,
    /// Keeps every pair it was ever given and will hand them to the
    /// counterparty.
    Colluding,
}

/// One channel's record. Every variant has a size independent of the
/// number of updates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum TowerRecord {
    L1 { setup: Digest, pair: Option<SignedPair> },
    L2 { q: Digest, packet: Option<CipherPacket>, last_tick: u64 },
    L3 { q: Digest, key: Option<(u32, Digest)>, reg: L3Registration },
}

impl TowerRecord {
    pub fn level(&self) -> PrivacyLevel {
        match self {
            TowerRecord::L1 { .. } => PrivacyLevel::L1,
            TowerRecord::L2 { .. } => PrivacyLevel::L2,
            TowerRecord::L3 { .. } => PrivacyLevel::L3,
        }
    }

    /// Canonical stored size in bytes.
    pub fn byte_size(&self) -> usize {
        match self {
            TowerRecord::L1 { pair, .. } => 32 + pair.as_ref().map_or(0, |p| p.byte_size()),
            TowerRecord::L2 { packet, .. } => 32 + 8 + packet.as_ref().map_or(0, |p| p.encoded_len()),
            TowerRecord::L3 { key, reg, .. } => {
                32 + key.map_or(0, |_| 4 + 32) + serde_json::to_vec(reg).expect("serializable").len()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TowerEventKind {
    Ingested { kind: TowerMsgKind },
    IngestFailed { reason: String },
    Derived { from: u32, to: u32, steps: u32 },
    Punishing { asserted: u32 },
    Published { txid: Digest, kind: TxKind },
    Rejected { txid: Digest, reason: String },
    DecryptFailure,
    StaleRecord { held: u32, needed: u32 },
    Betrayed { txid: Digest },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TowerEvent {
    pub tick: u64,
    pub channel: Digest,
    #[serde(flatten)]
    pub kind: TowerEventKind,
}

/// One received record as the tower saw it on the wire.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tick: u64,
    #[serde(with = "hex::serde")]
    pub bytes: Vec<u8>,
}

pub struct Tower {
    name: String,
    mode: TowerMode,
    records: BTreeMap<Digest, TowerRecord>,
    /// Only filled in colluding mode; not part of the record.
    retained: BTreeMap<Digest, Vec<SignedPair>>,
    htlc_store: BTreeMap<Digest, CipherPacket>,
    transcript: Vec<TranscriptEntry>,
    events: Vec<TowerEvent>,
    /// Assert candidates seen on chain: (txid, ots, P_e).
    l2_candidates: Vec<(Digest, OtsSignature, Preimage)>,
    scanned: usize,
    /// Channels for which the tower already acted or gave up.
    settled: BTreeMap<Digest, Digest>,
    now: u64,
}

impl Tower {
    pub fn new(name: impl Into<String>, mode: TowerMode) -> Tower {
        Tower {
            name: name.into(),
            mode,
            records: BTreeMap::new(),
            retained: BTreeMap::new(),
            htlc_store: BTreeMap::new(),
            transcript: Vec::new(),
            events: Vec::new(),
            l2_candidates: Vec::new(),
            scanned: 0,
            settled: BTreeMap::new(),
            now: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mode(&self) -> TowerMode {
        self.mode
    }

    pub fn record(&self, channel: &Digest) -> Option<&TowerRecord> {
        self.records.get(channel)
    }

    pub fn record_size(&self, channel: &Digest) -> Option<usize> {
        self.records.get(channel).map(|r| r.byte_size())
    }

    pub fn channels(&self) -> impl Iterator<Item = &Digest> {
        self.records.keys()
    }

    pub fn events(&self) -> &[TowerEvent] {
        &self.events
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn retained(&self, channel: &Digest) -> &[SignedPair] {
        self.retained.get(channel).map_or(&[], |v| v.as_slice())
    }

    fn log(&mut self, channel: Digest, kind: TowerEventKind) {
        self.events.push(TowerEvent { tick: self.now, channel, kind });
    }

    /// Decodes and applies one wire record.
    pub fn ingest_bytes(&mut self, now: u64, bytes: &[u8]) -> Result<(), TowerError> {
        self.now = now;
        self.transcript.push(TranscriptEntry { tick: now, bytes: bytes.to_vec() });
        let res = TowerMessage::decode(bytes).and_then(|m| self.apply(m));
        if let Err(e) = &res {
            self.log(Digest::ZERO, TowerEventKind::IngestFailed { reason: e.to_string() });
        }
        res
    }

    pub fn ingest(&mut self, now: u64, msg: &TowerMessage) -> Result<(), TowerError> {
        self.ingest_bytes(now, &msg.encode())
    }

    fn apply(&mut self, m: TowerMessage) -> Result<(), TowerError> {
        let ch = m.channel;
        match (m.kind, m.level) {
            (TowerMsgKind::Register, PrivacyLevel::L1) => {
                self.records.entry(ch).or_insert(TowerRecord::L1 { setup: ch, pair: None });
            }
            (TowerMsgKind::Register, PrivacyLevel::L2) => {
                self.records.entry(ch).or_insert(TowerRecord::L2 { q: ch, packet: None, last_tick: self.now });
            }
            (TowerMsgKind::Register, PrivacyLevel::L3) => {
                let reg: L3Registration =
                    serde_json::from_slice(&m.payload).map_err(|_| TowerError::Malformed("l3 registration"))?;
                self.records.insert(ch, TowerRecord::L3 { q: ch, key: None, reg });
            }
            (TowerMsgKind::Update, level) => {
                // level-2 channels register implicitly: the first packet
                // is indistinguishable from any other
                if level == PrivacyLevel::L2 {
                    self.records.entry(ch).or_insert(TowerRecord::L2 { q: ch, packet: None, last_tick: self.now });
                }
                let now = self.now;
                let mode = self.mode;
                let rec = self.records.get_mut(&ch).ok_or(TowerError::UnknownChannel(ch))?;
                if rec.level() != level {
                    return Err(TowerError::LevelMismatch { want: rec.level(), got: level });
                }
                match rec {
                    TowerRecord::L1 { pair, .. } => {
                        let new: SignedPair =
                            serde_json::from_slice(&m.payload).map_err(|_| TowerError::Malformed("l1 pair"))?;
                        if let Some(old) = pair.replace(new) {
                            if mode == TowerMode::Colluding {
                                self.retained.entry(ch).or_default().push(old);
                            }
                        }
                    }
                    TowerRecord::L2 { packet, last_tick, .. } => {
                        let p = CipherPacket::from_bytes(&m.payload).map_err(|_| TowerError::Malformed("l2 packet"))?;
                        if p.encoded_len() != crate::crypto::IV_LEN + L2_PAYLOAD_LEN + crate::crypto::TAG_LEN {
                            return Err(TowerError::Malformed("l2 packet size"));
                        }
                        *packet = Some(p);
                        *last_tick = now;
                    }
                    TowerRecord::L3 { key, .. } => {
                        let (i, k) = decode_l3_key(&m.payload)?;
                        if key.is_some_and(|(held, _)| held > i) {
                            return Err(TowerError::StaleRecord { held: key.expect("checked").0, needed: i });
                        }
                        *key = Some((i, k));
                    }
                }
            }
            (TowerMsgKind::HtlcStore, _) => {
                let p = CipherPacket::from_bytes(&m.payload).map_err(|_| TowerError::Malformed("htlc packet"))?;
                self.htlc_store.insert(ch, p);
            }
        }
        self.log(ch, TowerEventKind::Ingested { kind: m.kind });
        Ok(())
    }

    fn publish(&mut self, channel: Digest, chain: &mut Chain, tx: Transaction, kind: TxKind) -> bool {
        let txid = tx.txid();
        if chain.status(&txid).is_some() {
            return true;
        }
        match chain.submit(tx) {
            Ok(txid) => {
                self.log(channel, TowerEventKind::Published { txid, kind });
                true
            }
            Err(e) => {
                self.log(channel, TowerEventKind::Rejected { txid, reason: e.to_string() });
                false
            }
        }
    }

    /// Looks at the chain and punishes any stale exit it can.
    pub fn watch(&mut self, now: u64, chain: &mut Chain) {
        self.now = now;
        self.scan(chain);
        let channels: Vec<Digest> = self.records.keys().copied().collect();
        for ch in channels {
            if self.settled.contains_key(&ch) {
                continue;
            }
            let rec = self.records[&ch].clone();
            match rec {
                TowerRecord::L1 { setup, pair: Some(pair) } => self.watch_l1(ch, Outpoint::new(setup, 1), &pair, chain),
                TowerRecord::L2 { packet: Some(packet), .. } => self.watch_l2(ch, &packet, chain),
                TowerRecord::L3 { q, key: Some(key), reg } => self.watch_l3(ch, q, key, &reg, chain),
                _ => {}
            }
        }
    }

    fn scan(&mut self, chain: &Chain) {
        let txids = chain.txids();
        for txid in &txids[self.scanned.min(txids.len())..] {
            let Some(rec) = chain.tx(txid) else { continue };
            for input in &rec.tx.inputs {
                let w = &input.witness;
                let ots = w.items.iter().find_map(|i| match i {
                    Item::Ots(s) => Some(s.clone()),
                    _ => None,
                });
                let has_branch = w.items.iter().any(|i| matches!(i, Item::Bool(_)));
                if let (Some(ots), Some(p), true) = (ots, w.preimages().next(), has_branch) {
                    self.l2_candidates.push((*txid, ots, *p));
                }
            }
        }
        self.scanned = txids.len();
    }

    fn punish_with(&mut self, ch: Digest, pair: &SignedPair, m: u32, ots: &OtsSignature, chain: &mut Chain) {
        self.log(ch, TowerEventKind::Punishing { asserted: m });
        self.publish(ch, chain, pair.commit_tx(), pair.commit.kind);
        if self.publish(ch, chain, pair.punish_tx(ots), pair.punish.kind) {
            self.settled.insert(ch, pair.punish.txid());
        }
    }

    fn watch_l1(&mut self, ch: Digest, unilateral: Outpoint, pair: &SignedPair, chain: &mut Chain) {
        let Some(commit) = commit_exit_at(chain, &unilateral) else { return };
        let Some(a) = assert_at(chain, &Outpoint::new(commit.tx.txid(), 0)) else { return };
        let Some(m) = pair.cheater_key().and_then(|k| k.recover_value(&a.ots).ok()) else { return };
        if pair.punishes(m, &a.ots) {
            self.punish_with(ch, pair, m, &a.ots, chain);
        }
    }

    fn watch_l2(&mut self, ch: Digest, packet: &CipherPacket, chain: &mut Chain) {
        let candidates = self.l2_candidates.clone();
        for (_, ots, p_e) in candidates {
            let Ok(body) = decrypt(&Digest(p_e.0), packet) else { continue };
            let payload = match unpad_l2(&body) {
                Ok(Some(p)) => p,
                Ok(None) => continue,
                Err(_) => {
                    self.log(ch, TowerEventKind::DecryptFailure);
                    self.settled.insert(ch, Digest::ZERO);
                    return;
                }
            };
            let Some(m) = payload.pair.cheater_key().and_then(|k| k.recover_value(&ots).ok()) else { continue };
            if !payload.pair.punishes(m, &ots) {
                continue;
            }
            self.publish(ch, chain, payload.wt_disputes.clone(), TxKind::WtDisputes);
            self.punish_with(ch, &payload.pair, m, &ots, chain);
            return;
        }
    }

    fn watch_l3(&mut self, ch: Digest, q: Digest, (held, key): (u32, Digest), reg: &L3Registration, chain: &mut Chain) {
        let Some(commit) = commit_exit_at(chain, &Outpoint::new(q, 0)) else { return };
        if commit.initiator == reg.client {
            return;
        }
        let Some(a) = assert_at(chain, &Outpoint::new(commit.tx.txid(), 0)) else { return };
        let Some((j, for_alice, for_bob)) = commit.tx.op_return_payloads().find_map(parse_l3_payload) else { return };
        let packet = if reg.client == PeerRole::Alice { for_alice } else { for_bob };
        match self.l3_rebuild(ch, q, held, key, j, &packet, reg, &a.ots, chain) {
            Ok(Some((pair, m))) => self.punish_with(ch, &pair, m, &a.ots, chain),
            Ok(None) => {}
            Err(TowerError::StaleRecord { held, needed }) => {
                self.log(ch, TowerEventKind::StaleRecord { held, needed });
                self.settled.insert(ch, Digest::ZERO);
            }
            Err(_) => {
                self.log(ch, TowerEventKind::DecryptFailure);
                self.settled.insert(ch, Digest::ZERO);
            }
        }
    }

    /// Derives `K(j+1)`, decrypts the two signatures and rebuilds the pair
    /// from registration data and chain data alone.
    #[allow(clippy::too_many_arguments)]
    pub fn l3_rebuild(
        &mut self,
        ch: Digest,
        q: Digest,
        held: u32,
        key: Digest,
        j: u32,
        packet: &CipherPacket,
        reg: &L3Registration,
        ots: &OtsSignature,
        chain: &Chain,
    ) -> Result<Option<(SignedPair, u32)>, TowerError> {
        let needed = j.checked_add(1).ok_or(TowerError::Malformed("isn"))?;
        if needed > held {
            return Err(TowerError::StaleRecord { held, needed });
        }
        let k = derive_from(key, held, needed).map_err(|_| TowerError::StaleRecord { held, needed })?;
        self.log(ch, TowerEventKind::Derived { from: held, to: needed, steps: held - needed });
        let body = decrypt(&k, packet).map_err(|_| TowerError::DecryptFailure)?;
        if body.len() != 2 * COVENANT_SIG_LEN {
            return Err(TowerError::DecryptFailure);
        }
        let commit_sig = CovenantSignature::from_bytes(&body[..COVENANT_SIG_LEN]).map_err(|_| TowerError::DecryptFailure)?;
        let punish_sig = CovenantSignature::from_bytes(&body[COVENANT_SIG_LEN..]).map_err(|_| TowerError::DecryptFailure)?;
        let Ok(m) = reg.cheater_key.recover_value(ots) else { return Ok(None) };
        let start = chain.tx(&q).ok_or(TowerError::Malformed("StartExit not on chain"))?;
        let setup = start.tx.inputs.first().ok_or(TowerError::Malformed("StartExit input"))?.prevout.txid;
        let i_bal = chain.tx(&setup).and_then(|s| s.tx.outputs.first()).ok_or(TowerError::Malformed("setup"))?.amount;
        let spec = PunishSpec {
            keyset: reg.keyset,
            cheater: reg.client.other(),
            cheater_key: reg.cheater_key.clone(),
            dispute: Outpoint::new(q, if reg.client == PeerRole::Bob { 1 } else { 2 }),
            funds: Outpoint::new(setup, 0),
            i_bal,
            epsilon: reg.epsilon,
            threshold: m.checked_add(1).ok_or(TowerError::Malformed("esn"))?,
            beneficiary: reg.beneficiary.clone(),
            reward: reg.reward.clone(),
            tower: true,
        };
        let pair = build_punish_pair(&spec);
        let signed = SignedPair { commit: pair.commit, commit_sig, punish: pair.punish, punish_sig };
        Ok(signed.punishes(m, ots).then_some((signed, m)))
    }

    /// Colluding mode: spends the client's dispute output with the oldest
    /// pair it kept, which the cheater's assert can no longer trigger.
    pub fn betray(&mut self, channel: &Digest, chain: &mut Chain) -> Option<Digest> {
        let pair = self.retained.get(channel)?.first()?.clone();
        let tx = pair.commit_tx();
        let txid = tx.txid();
        if self.publish(*channel, chain, tx, pair.commit.kind) {
            self.log(*channel, TowerEventKind::Betrayed { txid });
            self.settled.insert(*channel, txid);
            Some(txid)
        } else {
            None
        }
    }
}

/// A value that must not appear in a tower's view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Needle {
    pub label: String,
    pub value: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Leak {
    pub label: String,
    pub value: u64,
    pub tick: u64,
    pub encoding: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} leak(s), first: {:?}", .0.len(), .0.first())]
pub struct LeakDetected(pub Vec<Leak>);

/// What a tower could observe: message ticks per channel, the distinct
/// record sizes, and how many channel ids appear on chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PrivacyReport {
    pub cadence: BTreeMap<Digest, Vec<u64>>,
    pub sizes: Vec<usize>,
    pub linked_channels: usize,
}

/// Decimal occurrence not embedded in a longer number.
#[cfg(test)]
fn contains_decimal(hay: &[u8], v: u64) -> bool {
    decimal_runs(hay).any(|d| d == v)
}

/// Every maximal run of ASCII digits that fits a u64.
fn decimal_runs(hay: &[u8]) -> impl Iterator<Item = u64> + '_ {
    hay.split(|c| !c.is_ascii_digit())
        .filter(|r| !r.is_empty() && r.len() <= 19)
        .filter_map(|r| std::str::from_utf8(r).ok()?.parse().ok())
}

/// Searches a transcript for any needle as a little-endian u64 or a
/// decimal string. Decimals are only looked for in text (a message or its
/// payload that is valid UTF-8): digit runs turn up by chance in ciphertext,
/// as would 4-byte encodings over a long transcript.
pub fn privacy_audit(
    transcript: &[TranscriptEntry],
    needles: &[Needle],
    chain: Option<&Chain>,
) -> Result<PrivacyReport, LeakDetected> {
    const ENCODINGS: [&str; 2] = ["u64le", "decimal"];
    let mut wide: HashMap<[u8; 8], Vec<usize>> = HashMap::new();
    let mut decimal: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, n) in needles.iter().enumerate() {
        if n.value == 0 {
            continue;
        }
        wide.entry(n.value.to_le_bytes()).or_default().push(i);
        if n.value >= 1000 {
            decimal.entry(n.value).or_default().push(i);
        }
    }
    let mut leaks = Vec::new();
    let mut cadence: BTreeMap<Digest, Vec<u64>> = BTreeMap::new();
    let mut sizes = Vec::new();
    for e in transcript {
        if let Ok(m) = TowerMessage::decode(&e.bytes) {
            cadence.entry(m.channel).or_default().push(e.tick);
        }
        if !sizes.contains(&e.bytes.len()) {
            sizes.push(e.bytes.len());
        }
        // needle index -> best (lowest) encoding seen in this message
        let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
        let mut hit = |idx: &Vec<usize>, enc: usize| {
            for &i in idx {
                let best = hits.entry(i).or_insert(enc);
                *best = (*best).min(enc);
            }
        };
        for w in e.bytes.windows(8) {
            if let Some(idx) = wide.get(<&[u8; 8]>::try_from(w).expect("window of 8")) {
                hit(idx, 0);
            }
        }
        let payload = TowerMessage::decode(&e.bytes).map(|m| m.payload).ok();
        let text = [Some(&e.bytes[..]), payload.as_deref()].into_iter().flatten().find(|b| std::str::from_utf8(b).is_ok());
        for d in text.into_iter().flat_map(decimal_runs) {
            if let Some(idx) = decimal.get(&d) {
                hit(idx, 1);
            }
        }
        for (i, enc) in hits {
            let n = &needles[i];
            leaks.push(Leak { label: n.label.clone(), value: n.value, tick: e.tick, encoding: ENCODINGS[enc] });
        }
    }
    if !leaks.is_empty() {
        return Err(LeakDetected(leaks));
    }
    let linked_channels = chain.map_or(0, |c| cadence.keys().filter(|id| c.tx(id).is_some()).count());
    sizes.sort_unstable();
    Ok(PrivacyReport { cadence, sizes, linked_channels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_match_respects_digit_boundaries() {
        assert!(contains_decimal(b"{\"a\":12345}", 12345));
        assert!(!contains_decimal(b"{\"a\":123456}", 12345));
        assert!(!contains_decimal(b"912345", 12345));
    }

    #[test]
    fn audit_flags_plain_amounts() {
        let t = vec![TranscriptEntry { tick: 3, bytes: b"balance 250000".to_vec() }];
        let n = vec![Needle { label: "a_bal".into(), value: 250_000 }];
        let err = privacy_audit(&t, &n, None).unwrap_err();
        assert_eq!(err.0[0].encoding, "decimal");
        let t = vec![TranscriptEntry { tick: 3, bytes: b"\xff\x00 250000 \xfe".to_vec() }];
        assert!(privacy_audit(&t, &n, None).is_ok());
        let t = vec![TranscriptEntry { tick: 3, bytes: 250_000u64.to_le_bytes().to_vec() }];
        assert_eq!(privacy_audit(&t, &n, None).unwrap_err().0[0].encoding, "u64le");
    }

    #[test]
    fn unknown_channel_update_rejected() {
        let mut t = Tower::new("t", TowerMode::Honest);
        let m = TowerMessage {
            channel: Digest([1; 32]),
            level: PrivacyLevel::L3,
            kind: TowerMsgKind::Update,
            payload: encode_l3_key(1, &Digest([2; 32])),
        };
        assert_eq!(t.ingest(0, &m), Err(TowerError::UnknownChannel(Digest([1; 32]))));
        assert_eq!(t.transcript().len(), 1);
    }

    #[test]
    fn garbage_record_is_malformed() {
        let mut t = Tower::new("t", TowerMode::Honest);
        assert!(matches!(t.ingest_bytes(0, &[1, 2, 3]), Err(TowerError::Malformed(_))));
    }
}
