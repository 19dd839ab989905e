use serde::{Deserialize, Serialize};

use super::hash::{sha256, Digest};
use super::CryptoError;

/// Upper bound on chain length accepted in simulation.
pub const MAX_CHAIN_LENGTH: u32 = 1 << 20;

/// A backward hash chain: `derive(length) = seed` and
/// `derive(i - 1) = H(derive(i))`. Revealing `derive(i)` discloses every
/// lower index but none above it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashChain {
    seed: Digest,
    length: u32,
}

impl HashChain {
    pub fn new(seed: Digest, length: u32) -> Result<HashChain, CryptoError> {
        if length == 0 || length > MAX_CHAIN_LENGTH {
            return Err(CryptoError::ChainLength(length));
        }
        Ok(HashChain { seed, length })
    }

    pub fn length(&self) -> u32 {
        self.length
    }

    pub fn derive(&self, index: u32) -> Result<Digest, CryptoError> {
        if index > self.length {
            return Err(CryptoError::ChainIndex { index, length: self.length });
        }
        Ok(walk_down(self.seed, self.length - index))
    }
}

/// Applies the hash `steps` times.
pub fn walk_down(mut key: Digest, steps: u32) -> Digest {
    for _ in 0..steps {
        key = sha256(&key.0);
    }
    key
}

/// Given the key at index `from`, returns the key at `to <= from`.
pub fn derive_from(key: Digest, from: u32, to: u32) -> Result<Digest, CryptoError> {
    if to > from {
        return Err(CryptoError::ChainIndex { index: to, length: from });
    }
    Ok(walk_down(key, from - to))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_is_seed() {
        let c = HashChain::new(sha256(b"s"), 1000).unwrap();
        assert_eq!(c.derive(1000).unwrap(), sha256(b"s"));
    }

    #[test]
    fn defining_relation() {
        let c = HashChain::new(sha256(b"s"), 1000).unwrap();
        assert_eq!(sha256(&c.derive(5).unwrap().0), c.derive(4).unwrap());
    }

    #[test]
    fn tail_matches_independent_loop() {
        let seed = sha256(b"s");
        let c = HashChain::new(seed, 1000).unwrap();
        let mut x = seed.0;
        for _ in 0..1000 {
            use sha2::{Digest as _, Sha256};
            x = Sha256::digest(x).into();
        }
        assert_eq!(c.derive(0).unwrap().0, x);
    }

    #[test]
    fn index_out_of_range() {
        let c = HashChain::new(sha256(b"s"), 10).unwrap();
        assert!(matches!(c.derive(11), Err(CryptoError::ChainIndex { .. })));
        assert!(HashChain::new(sha256(b"s"), MAX_CHAIN_LENGTH + 1).is_err());
    }

    #[test]
    fn derive_from_counts_steps() {
        let c = HashChain::new(sha256(b"s"), 200).unwrap();
        let k101 = c.derive(101).unwrap();
        assert_eq!(derive_from(k101, 101, 74).unwrap(), c.derive(74).unwrap());
        assert!(derive_from(k101, 101, 102).is_err());
    }
}
