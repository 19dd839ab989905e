//! A small stack machine covering exactly the opcode macros the channel
//! scripts need, plus output-lock commitments and witness construction.

mod lock;
pub mod templates;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    hash160, CovenantKeySet, CovenantSignature, Digest, Digest20, KeyRegistry, OtsPublicKey, OtsSignature,
    Preimage, PublicKeyId, Signature,
};
use crate::encoding::Encoder;

pub use lock::{lock_of, OutputLock};
pub use templates::{build_witness_for, SpendMaterial, SpendPath};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScriptOp {
    PushBytes(#[serde(with = "hex::serde")] Vec<u8>),
    PushInt(u32),
    Dup,
    If,
    Else,
    EndIf,
    Verify,
    /// Pops `b` then `a`, pushes `a < b`.
    LessThan,
    /// Both owners approve this transaction for the given tap path
    /// (`None` for single-script outputs, signed as path 0).
    CovenantCheck { keyset: CovenantKeySet, path: Option<u8> },
    CSigV(PublicKeyId),
    /// Relative timelock: spent output needs at least this many confirmations.
    CSeqV(u32),
    CHashV(Digest20),
    CValV(u32),
    /// Pops a one-time signature, verifies it under any listed key and
    /// pushes the recovered value.
    OtCSigV(Vec<OtsPublicKey>),
    /// Absolute timelock: chain height must be at least this value.
    AbsLockV(u32),
    /// Chain height must be strictly below this value.
    BeforeHeightV(u32),
    OpReturn(#[serde(with = "hex::serde")] Vec<u8>),
}

impl ScriptOp {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            ScriptOp::PushBytes(_) => "PUSHBYTES",
            ScriptOp::PushInt(_) => "PUSHINT",
            ScriptOp::Dup => "DUP",
            ScriptOp::If => "IF",
            ScriptOp::Else => "ELSE",
            ScriptOp::EndIf => "ENDIF",
            ScriptOp::Verify => "VERIFY",
            ScriptOp::LessThan => "LESSTHAN",
            ScriptOp::CovenantCheck { .. } => "COVENANT_CHECK",
            ScriptOp::CSigV(_) => "CSIGV",
            ScriptOp::CSeqV(_) => "CSEQV",
            ScriptOp::CHashV(_) => "CHASHV",
            ScriptOp::CValV(_) => "CVALV",
            ScriptOp::OtCSigV(_) => "OT_CSIGV",
            ScriptOp::AbsLockV(_) => "CLTV",
            ScriptOp::BeforeHeightV(_) => "BEFORE_HEIGHTV",
            ScriptOp::OpReturn(_) => "RETURN",
        }
    }

    fn encode(&self, e: &mut Encoder) {
        match self {
            ScriptOp::PushBytes(b) => {
                e.u8(0x01).bytes(b);
            }
            ScriptOp::PushInt(v) => {
                e.u8(0x02).u32(*v);
            }
            ScriptOp::Dup => {
                e.u8(0x03);
            }
            ScriptOp::If => {
                e.u8(0x04);
            }
            ScriptOp::Else => {
                e.u8(0x05);
            }
            ScriptOp::EndIf => {
                e.u8(0x06);
            }
            ScriptOp::Verify => {
                e.u8(0x07);
            }
            ScriptOp::LessThan => {
                e.u8(0x08);
            }
            ScriptOp::CovenantCheck { keyset, path } => {
                e.u8(0x09).key_id(&keyset.alice).key_id(&keyset.bob).u8(path.map_or(0, |p| p));
            }
            ScriptOp::CSigV(k) => {
                e.u8(0x0a).key_id(k);
            }
            ScriptOp::CSeqV(t) => {
                e.u8(0x0b).u32(*t);
            }
            ScriptOp::CHashV(h) => {
                e.u8(0x0c).digest20(h);
            }
            ScriptOp::CValV(v) => {
                e.u8(0x0d).u32(*v);
            }
            ScriptOp::OtCSigV(keys) => {
                e.u8(0x0e).u32(keys.len() as u32);
                for k in keys {
                    e.ots_public(k);
                }
            }
            ScriptOp::AbsLockV(h) => {
                e.u8(0x0f).u32(*h);
            }
            ScriptOp::BeforeHeightV(h) => {
                e.u8(0x10).u32(*h);
            }
            ScriptOp::OpReturn(d) => {
                e.u8(0x6a).bytes(d);
            }
        }
    }
}

impl fmt::Display for ScriptOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            ScriptOp::PushBytes(b) => write!(f, "{m} {}", hex::encode(b)),
            ScriptOp::PushInt(v) | ScriptOp::CSeqV(v) | ScriptOp::CValV(v) => write!(f, "{m} {v}"),
            ScriptOp::AbsLockV(v) | ScriptOp::BeforeHeightV(v) => write!(f, "{m} {v}"),
            ScriptOp::CovenantCheck { keyset, path } => match path {
                Some(p) => write!(f, "{m}({p}) {}", &keyset.id().to_hex()[..16]),
                None => write!(f, "{m} {}", &keyset.id().to_hex()[..16]),
            },
            ScriptOp::CSigV(k) => write!(f, "{m} {}", &k.0.to_hex()[..16]),
            ScriptOp::CHashV(h) => write!(f, "{m} {}", hex::encode(h.0)),
            ScriptOp::OtCSigV(keys) => {
                write!(f, "{m}")?;
                for k in keys {
                    write!(f, " {}", &k.fingerprint().to_hex()[..16])?;
                }
                Ok(())
            }
            ScriptOp::OpReturn(d) => write!(f, "{m} {}", hex::encode(d)),
            _ => f.write_str(m),
        }
    }
}

/// An ordered list of ops.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Script(pub Vec<ScriptOp>);

impl Script {
    pub fn new(ops: Vec<ScriptOp>) -> Script {
        Script(ops)
    }

    pub fn ops(&self) -> &[ScriptOp] {
        &self.0
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u32(self.0.len() as u32);
        for op in &self.0 {
            op.encode(e);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.finish()
    }

    /// One op per line.
    pub fn disassemble(&self) -> String {
        let mut out = String::new();
        for op in &self.0 {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }

    /// Checks that If/Else/EndIf are properly nested.
    pub fn check_nesting(&self) -> Result<(), ScriptFailure> {
        let mut depth: Vec<bool> = Vec::new(); // per open IF: seen ELSE?
        for (i, op) in self.0.iter().enumerate() {
            match op {
                ScriptOp::If => depth.push(false),
                ScriptOp::Else => match depth.last_mut() {
                    Some(seen) if !*seen => *seen = true,
                    _ => return Err(ScriptFailure::at(i, op, FailureKind::BadNesting)),
                },
                ScriptOp::EndIf
                    if depth.pop().is_none() => {
                        return Err(ScriptFailure::at(i, op, FailureKind::BadNesting));
                    }
                _ => {}
            }
        }
        if !depth.is_empty() {
            let i = self.0.len();
            return Err(ScriptFailure { op_index: i, op: "END", kind: FailureKind::BadNesting });
        }
        Ok(())
    }
}

/// Typed stack element. Witnesses carry the same items.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Item {
    Bytes(#[serde(with = "hex::serde")] Vec<u8>),
    Int(u32),
    Bool(bool),
    Preimage(Preimage),
    Ots(OtsSignature),
    Covenant(CovenantSignature),
    Sig(Signature),
}

impl Item {
    fn truthy(&self) -> bool {
        match self {
            Item::Bytes(b) => b.iter().any(|&x| x != 0),
            Item::Int(v) => *v != 0,
            Item::Bool(b) => *b,
            // signatures and preimages are data, never a success value
            _ => false,
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        match self {
            Item::Bytes(b) => {
                e.u8(1).bytes(b);
            }
            Item::Int(v) => {
                e.u8(2).u32(*v);
            }
            Item::Bool(b) => {
                e.u8(3).u8(*b as u8);
            }
            Item::Preimage(p) => {
                e.u8(4).preimage(p);
            }
            Item::Ots(s) => {
                e.u8(5).ots_sig(s);
            }
            Item::Covenant(s) => {
                e.u8(6).covenant_sig(s);
            }
            Item::Sig(s) => {
                e.u8(7).signature(s);
            }
        }
    }
}

/// Items pushed before the revealed script runs (last item is the top of
/// the stack), plus the tap leaf being revealed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Witness {
    pub items: Vec<Item>,
    pub leaf_index: Option<u32>,
}

impl Witness {
    pub fn new(items: Vec<Item>, leaf_index: Option<u32>) -> Witness {
        Witness { items, leaf_index }
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u32(self.leaf_index.map_or(u32::MAX, |i| i));
        e.u32(self.items.len() as u32);
        for it in &self.items {
            it.encode(e);
        }
    }

    pub fn ots_signatures(&self) -> impl Iterator<Item = &OtsSignature> {
        self.items.iter().filter_map(|i| match i {
            Item::Ots(s) => Some(s),
            _ => None,
        })
    }

    pub fn preimages(&self) -> impl Iterator<Item = &Preimage> {
        self.items.iter().filter_map(|i| match i {
            Item::Preimage(p) => Some(p),
            _ => None,
        })
    }
}

/// What the script can see of the spending transaction and the chain.
#[derive(Clone, Copy, Debug)]
pub struct ExecContext<'a> {
    pub sighash: Digest,
    pub input_index: u32,
    /// Current chain tip height.
    pub height: u32,
    /// Blocks mined on top of the block that confirmed the spent output
    /// (0 while it is unconfirmed or just confirmed).
    pub confirmations: u32,
    pub registry: &'a KeyRegistry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureKind {
    StackUnderflow,
    TypeMismatch,
    SigInvalid,
    HashMismatch,
    SeqNotMatured,
    LockNotReached,
    Expired,
    ValueMismatch,
    BadNesting,
    OpReturn,
    UncleanStack,
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize)]
#[error("{kind:?} at op {op_index} ({op})")]
pub struct ScriptFailure {
    pub op_index: usize,
    pub op: &'static str,
    pub kind: FailureKind,
}

impl ScriptFailure {
    fn at(i: usize, op: &ScriptOp, kind: FailureKind) -> ScriptFailure {
        ScriptFailure { op_index: i, op: op.mnemonic(), kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("leaf {0} not in tree")]
    LeafNotInTree(u32),
    #[error("witness is missing {0}")]
    MissingItem(&'static str),
}

/// Runs `script` with the witness items preloaded on the stack.
///
/// Success requires every verify-class op to pass and the final stack to be
/// either empty or a single truthy element.
pub fn execute(script: &Script, witness: &Witness, ctx: &ExecContext<'_>) -> Result<(), ScriptFailure> {
    script.check_nesting()?;
    // Each element remembers which op pushed it so a failing VERIFY can be
    // attributed to the comparison that produced the false.
    let mut stack: Vec<(Item, Option<usize>)> = witness.items.iter().cloned().map(|i| (i, None)).collect();
    let mut exec: Vec<bool> = Vec::new();

    for (i, op) in script.0.iter().enumerate() {
        let fail = |kind| ScriptFailure::at(i, op, kind);
        let active = exec.iter().all(|&b| b);
        match op {
            ScriptOp::If => {
                if active {
                    let (cond, _) = stack.pop().ok_or(fail(FailureKind::StackUnderflow))?;
                    exec.push(cond.truthy());
                } else {
                    exec.push(false);
                }
                continue;
            }
            ScriptOp::Else => {
                let top = exec.last_mut().ok_or(fail(FailureKind::BadNesting))?;
                *top = !*top;
                continue;
            }
            ScriptOp::EndIf => {
                exec.pop().ok_or(fail(FailureKind::BadNesting))?;
                continue;
            }
            _ if !active => continue,
            _ => {}
        }

        macro_rules! pop {
            () => {
                stack.pop().ok_or(fail(FailureKind::StackUnderflow))?
            };
        }

        match op {
            ScriptOp::PushBytes(b) => stack.push((Item::Bytes(b.clone()), Some(i))),
            ScriptOp::PushInt(v) => stack.push((Item::Int(*v), Some(i))),
            ScriptOp::Dup => {
                let top = stack.last().cloned().ok_or(fail(FailureKind::StackUnderflow))?;
                stack.push(top);
            }
            ScriptOp::Verify => {
                let (v, origin) = pop!();
                if !v.truthy() {
                    return Err(match origin {
                        Some(o) => ScriptFailure::at(o, &script.0[o], FailureKind::ValueMismatch),
                        None => fail(FailureKind::ValueMismatch),
                    });
                }
            }
            ScriptOp::LessThan => {
                let (b, _) = pop!();
                let (a, _) = pop!();
                match (a, b) {
                    (Item::Int(a), Item::Int(b)) => stack.push((Item::Bool(a < b), Some(i))),
                    _ => return Err(fail(FailureKind::TypeMismatch)),
                }
            }
            ScriptOp::CovenantCheck { keyset, path } => match pop!().0 {
                Item::Covenant(sig) => {
                    if !ctx.registry.verify_covenant(keyset, &sig, &ctx.sighash, path.unwrap_or(0)) {
                        return Err(fail(FailureKind::SigInvalid));
                    }
                }
                _ => return Err(fail(FailureKind::SigInvalid)),
            },
            ScriptOp::CSigV(key) => match pop!().0 {
                Item::Sig(sig) => {
                    if !ctx.registry.verify(&sig, key, &ctx.sighash) {
                        return Err(fail(FailureKind::SigInvalid));
                    }
                }
                _ => return Err(fail(FailureKind::SigInvalid)),
            },
            ScriptOp::CSeqV(t) => {
                if ctx.confirmations < *t {
                    return Err(fail(FailureKind::SeqNotMatured));
                }
            }
            ScriptOp::AbsLockV(h) => {
                if ctx.height < *h {
                    return Err(fail(FailureKind::LockNotReached));
                }
            }
            ScriptOp::BeforeHeightV(h) => {
                if ctx.height >= *h {
                    return Err(fail(FailureKind::Expired));
                }
            }
            ScriptOp::CHashV(expected) => {
                let bytes = match pop!().0 {
                    Item::Preimage(p) => p.0.to_vec(),
                    Item::Bytes(b) => b,
                    _ => return Err(fail(FailureKind::HashMismatch)),
                };
                if hash160(&bytes) != *expected {
                    return Err(fail(FailureKind::HashMismatch));
                }
            }
            ScriptOp::CValV(expected) => match pop!().0 {
                Item::Int(v) if v == *expected => {}
                Item::Int(_) => return Err(fail(FailureKind::ValueMismatch)),
                _ => return Err(fail(FailureKind::TypeMismatch)),
            },
            ScriptOp::OtCSigV(keys) => match pop!().0 {
                Item::Ots(sig) => {
                    let value = keys
                        .iter()
                        .find_map(|k| k.recover_value(&sig).ok())
                        .ok_or(fail(FailureKind::SigInvalid))?;
                    stack.push((Item::Int(value), Some(i)));
                }
                _ => return Err(fail(FailureKind::SigInvalid)),
            },
            ScriptOp::OpReturn(_) => return Err(fail(FailureKind::OpReturn)),
            ScriptOp::If | ScriptOp::Else | ScriptOp::EndIf => unreachable!("handled above"),
        }
    }

    match stack.as_slice() {
        [] => Ok(()),
        [(top, _)] if top.truthy() => Ok(()),
        _ => Err(ScriptFailure { op_index: script.0.len(), op: "END", kind: FailureKind::UncleanStack }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{covenant_sign, sha256, OtsKeyPair, OtsParams, SigningKey};

    struct Fx {
        reg: KeyRegistry,
        a: SigningKey,
        b: SigningKey,
        ks: CovenantKeySet,
    }

    fn fx() -> Fx {
        let reg = KeyRegistry::new();
        let a = SigningKey::from_seed(b"a");
        let b = SigningKey::from_seed(b"b");
        reg.register(&a);
        reg.register(&b);
        let ks = CovenantKeySet { alice: a.public(), bob: b.public() };
        Fx { reg, a, b, ks }
    }

    fn ctx<'a>(reg: &'a KeyRegistry, sighash: Digest, conf: u32) -> ExecContext<'a> {
        ExecContext { sighash, input_index: 0, height: 100, confirmations: conf, registry: reg }
    }

    #[test]
    fn punish_script_strict_less_than() {
        let f = fx();
        let mut alice_ots = OtsKeyPair::generate(OtsParams::default(), &[1; 32]).unwrap();
        let script = templates::punish_script(&f.ks, alice_ots.public(), 100);
        let d = sha256(b"punish");
        let cov = covenant_sign(&f.ks, &f.a, &f.b, &d, 0).unwrap();

        let sig50 = alice_ots.sign(50).unwrap();
        let w = Witness::new(vec![Item::Ots(sig50), Item::Covenant(cov)], None);
        assert_eq!(execute(&script, &w, &ctx(&f.reg, d, 0)), Ok(()));

        // same key material, fresh latch: sign the boundary value
        let sig100 = OtsKeyPair::generate(OtsParams::default(), &[1; 32]).unwrap().sign(100).unwrap();
        let w = Witness::new(vec![Item::Ots(sig100), Item::Covenant(cov)], None);
        let err = execute(&script, &w, &ctx(&f.reg, d, 0)).unwrap_err();
        assert_eq!(err.kind, FailureKind::ValueMismatch);
        assert_eq!(err.op, "LESSTHAN");
    }

    #[test]
    fn chashv_with_flipped_preimage() {
        let p = Preimage([9; 32]);
        let script = Script::new(vec![ScriptOp::CHashV(hash160(&p.0))]);
        let reg = KeyRegistry::new();
        let c = ctx(&reg, Digest::ZERO, 0);
        assert!(execute(&script, &Witness::new(vec![Item::Preimage(p)], None), &c).is_ok());
        let mut bad = p;
        bad.0[0] ^= 1;
        let err = execute(&script, &Witness::new(vec![Item::Preimage(bad)], None), &c).unwrap_err();
        assert_eq!(err.kind, FailureKind::HashMismatch);
    }

    #[test]
    fn cseqv_boundary() {
        let script = Script::new(vec![ScriptOp::CSeqV(6)]);
        let reg = KeyRegistry::new();
        let w = Witness::default();
        assert_eq!(execute(&script, &w, &ctx(&reg, Digest::ZERO, 5)).unwrap_err().kind, FailureKind::SeqNotMatured);
        assert!(execute(&script, &w, &ctx(&reg, Digest::ZERO, 6)).is_ok());
        assert!(execute(&script, &w, &ctx(&reg, Digest::ZERO, 7)).is_ok());
    }

    #[test]
    fn if_else_branches() {
        let script = Script::new(vec![
            ScriptOp::If,
            ScriptOp::PushInt(1),
            ScriptOp::Else,
            ScriptOp::PushInt(0),
            ScriptOp::EndIf,
        ]);
        let reg = KeyRegistry::new();
        let c = ctx(&reg, Digest::ZERO, 0);
        assert!(execute(&script, &Witness::new(vec![Item::Bool(true)], None), &c).is_ok());
        let err = execute(&script, &Witness::new(vec![Item::Bool(false)], None), &c).unwrap_err();
        assert_eq!(err.kind, FailureKind::UncleanStack);
    }

    #[test]
    fn bad_nesting_detected() {
        let reg = KeyRegistry::new();
        let c = ctx(&reg, Digest::ZERO, 0);
        for ops in [vec![ScriptOp::Else], vec![ScriptOp::If], vec![ScriptOp::EndIf], vec![
            ScriptOp::If,
            ScriptOp::Else,
            ScriptOp::Else,
            ScriptOp::EndIf,
        ]] {
            let err = execute(&Script::new(ops), &Witness::new(vec![Item::Bool(true)], None), &c).unwrap_err();
            assert_eq!(err.kind, FailureKind::BadNesting);
        }
    }

    #[test]
    fn underflow_and_dup() {
        let reg = KeyRegistry::new();
        let c = ctx(&reg, Digest::ZERO, 0);
        let err = execute(&Script::new(vec![ScriptOp::Verify]), &Witness::default(), &c).unwrap_err();
        assert_eq!(err.kind, FailureKind::StackUnderflow);
        let s = Script::new(vec![ScriptOp::Dup, ScriptOp::CValV(3), ScriptOp::CValV(3)]);
        assert!(execute(&s, &Witness::new(vec![Item::Int(3)], None), &c).is_ok());
    }

    #[test]
    fn op_return_unspendable() {
        let reg = KeyRegistry::new();
        let s = Script::new(vec![ScriptOp::OpReturn(vec![1, 2])]);
        let err = execute(&s, &Witness::default(), &ctx(&reg, Digest::ZERO, 0)).unwrap_err();
        assert_eq!(err.kind, FailureKind::OpReturn);
    }

    #[test]
    fn height_guards() {
        let reg = KeyRegistry::new();
        let mut c = ctx(&reg, Digest::ZERO, 0);
        let before = Script::new(vec![ScriptOp::BeforeHeightV(100)]);
        let after = Script::new(vec![ScriptOp::AbsLockV(100)]);
        c.height = 99;
        assert!(execute(&before, &Witness::default(), &c).is_ok());
        assert!(execute(&after, &Witness::default(), &c).is_err());
        c.height = 100;
        assert_eq!(execute(&before, &Witness::default(), &c).unwrap_err().kind, FailureKind::Expired);
        assert!(execute(&after, &Witness::default(), &c).is_ok());
    }

    #[test]
    fn ots_pushes_recovered_value() {
        let f = fx();
        let mut k = OtsKeyPair::generate(OtsParams::default(), &[5; 32]).unwrap();
        let sig = k.sign(4242).unwrap();
        let s = Script::new(vec![ScriptOp::OtCSigV(vec![k.public().clone()]), ScriptOp::CValV(4242)]);
        let c = ctx(&f.reg, Digest::ZERO, 0);
        assert!(execute(&s, &Witness::new(vec![Item::Ots(sig.clone())], None), &c).is_ok());
        let mut bad = sig;
        bad.chain_values[0].0[5] ^= 0x10;
        let err = execute(&s, &Witness::new(vec![Item::Ots(bad)], None), &c).unwrap_err();
        assert_eq!(err.kind, FailureKind::SigInvalid);
    }

    #[test]
    fn disassembly_one_op_per_line() {
        let f = fx();
        let s = templates::unilateral_exit_script(&f.ks, Digest20([1; 20]), Digest20([2; 20]));
        let text = s.disassemble();
        assert_eq!(text.lines().count(), s.ops().len());
        assert!(text.starts_with("COVENANT_CHECK "));
        assert!(text.contains("\nIF\n"));
    }

    #[test]
    fn determinism() {
        let f = fx();
        let d = sha256(b"x");
        let cov = covenant_sign(&f.ks, &f.a, &f.b, &d, 0).unwrap();
        let s = templates::covenant_script(&f.ks);
        let w = Witness::new(vec![Item::Covenant(cov)], None);
        let r1 = execute(&s, &w, &ctx(&f.reg, d, 0));
        let r2 = execute(&s, &w, &ctx(&f.reg, d, 0));
        assert_eq!(r1, r2);
        assert!(r1.is_ok());
    }
}
