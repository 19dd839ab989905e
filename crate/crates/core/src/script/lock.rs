use serde::{Deserialize, Serialize};

use super::{Script, ScriptError, ScriptOp};
use crate::crypto::{tagged_hash, Digest};
use crate::encoding::Encoder;

/// How an output is locked.
///
/// `ScriptHash` stands in for P2WSH, `TapTree` for a taproot output with an
/// unspendable internal key (script-path spends only), and `Bare` for
/// scripts placed directly in the output, which is how OP_RETURN data is
/// carried.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputLock {
    ScriptHash(Script),
    TapTree(Vec<Script>),
    Bare(Script),
}

/// One script gives a script-hash lock; several give a tap tree.
pub fn lock_of(mut scripts: Vec<Script>) -> Result<OutputLock, ScriptError> {
    match scripts.len() {
        0 => Err(ScriptError::LeafNotInTree(0)),
        1 => Ok(OutputLock::ScriptHash(scripts.remove(0))),
        _ => Ok(OutputLock::TapTree(scripts)),
    }
}

impl OutputLock {
    pub fn op_return(data: Vec<u8>) -> OutputLock {
        OutputLock::Bare(Script::new(vec![ScriptOp::OpReturn(data)]))
    }

    /// Digest committing to the script (or ordered leaf list).
    pub fn commitment(&self) -> Digest {
        match self {
            OutputLock::ScriptHash(s) => tagged_hash("lock/wsh", &[&s.to_bytes()]),
            OutputLock::TapTree(leaves) => {
                let hashes: Vec<Digest> = leaves.iter().map(|l| tagged_hash("lock/leaf", &[&l.to_bytes()])).collect();
                let parts: Vec<&[u8]> = hashes.iter().map(|h| h.0.as_slice()).collect();
                tagged_hash("lock/tap", &parts)
            }
            OutputLock::Bare(s) => tagged_hash("lock/bare", &[&s.to_bytes()]),
        }
    }

    /// Script revealed by a spend of leaf `index`.
    pub fn reveal(&self, index: Option<u32>) -> Result<&Script, ScriptError> {
        match (self, index) {
            (OutputLock::ScriptHash(s), None | Some(0)) => Ok(s),
            (OutputLock::Bare(s), None | Some(0)) => Ok(s),
            (OutputLock::TapTree(leaves), Some(i)) => {
                leaves.get(i as usize).ok_or(ScriptError::LeafNotInTree(i))
            }
            (_, i) => Err(ScriptError::LeafNotInTree(i.unwrap_or(u32::MAX))),
        }
    }

    /// Checks that `script` is the leaf committed at `index`.
    pub fn verify_reveal(&self, script: &Script, index: Option<u32>) -> Result<(), ScriptError> {
        let committed = self.reveal(index)?;
        if committed == script {
            Ok(())
        } else {
            Err(ScriptError::LeafNotInTree(index.unwrap_or(0)))
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            OutputLock::TapTree(l) => l.len(),
            _ => 1,
        }
    }

    pub fn op_return_payload(&self) -> Option<&[u8]> {
        match self {
            OutputLock::Bare(s) => match s.ops() {
                [ScriptOp::OpReturn(d)] => Some(d),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn encode(&self, e: &mut Encoder) {
        match self {
            OutputLock::ScriptHash(_) => {
                e.u8(0).digest(&self.commitment());
            }
            OutputLock::TapTree(_) => {
                e.u8(1).digest(&self.commitment());
            }
            OutputLock::Bare(s) => {
                e.u8(2);
                s.encode(e);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: u32) -> Script {
        Script::new(vec![ScriptOp::PushInt(v)])
    }

    #[test]
    fn single_script_lock() {
        let l = lock_of(vec![s(1)]).unwrap();
        assert_eq!(l.reveal(Some(0)).unwrap(), &s(1));
        assert_eq!(l.reveal(None).unwrap(), &s(1));
        assert!(l.reveal(Some(1)).is_err());
    }

    #[test]
    fn tree_reveal_and_foreign_script() {
        let l = lock_of(vec![s(1), s(2), s(3)]).unwrap();
        assert_eq!(l.reveal(Some(2)).unwrap(), &s(3));
        assert!(matches!(l.reveal(Some(3)), Err(ScriptError::LeafNotInTree(3))));
        assert!(l.verify_reveal(&s(9), Some(0)).is_err());
        assert!(l.verify_reveal(&s(2), Some(1)).is_ok());
        assert!(l.reveal(None).is_err());
    }

    #[test]
    fn commitment_binds_order() {
        let a = lock_of(vec![s(1), s(2)]).unwrap();
        let b = lock_of(vec![s(2), s(1)]).unwrap();
        assert_ne!(a.commitment(), b.commitment());
    }

    #[test]
    fn empty_list_rejected() {
        assert!(lock_of(vec![]).is_err());
    }

    #[test]
    fn op_return_payload() {
        let l = OutputLock::op_return(vec![1, 2, 3]);
        assert_eq!(l.op_return_payload(), Some(&[1u8, 2, 3][..]));
    }
}
