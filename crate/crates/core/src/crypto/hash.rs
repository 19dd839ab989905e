//! Fixed-width digests and the two hash functions used throughout the
//! simulator: SHA-256 as the primary hash and RIPEMD-160(SHA-256(x)) as the
//! address-style hash checked by `CHASHV`.

use std::fmt;

use ripemd::Ripemd160;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Digest(#[serde(with = "hex_array")] pub [u8; 32]);

/// A 20-byte HASH160 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Digest20(#[serde(with = "hex_array")] pub [u8; 20]);

/// A 32-byte secret whose HASH160 is published ahead of time.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Preimage(#[serde(with = "hex_array")] pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl Digest20 {
    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }
}

impl Preimage {
    pub fn hash(&self) -> Digest20 {
        hash160(&self.0)
    }

    /// Derives a preimage from a domain label and seed material.
    pub fn derive(label: &str, seed: &[u8]) -> Preimage {
        Preimage(tagged_hash(label, &[seed]).0)
    }
}

pub fn sha256(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

pub fn hash160(data: &[u8]) -> Digest20 {
    let inner = Sha256::digest(data);
    Digest20(Ripemd160::digest(inner).into())
}

/// SHA-256 over a label followed by each part, with the label length-prefixed
/// so distinct domains never collide.
pub fn tagged_hash(tag: &str, parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    h.update((tag.len() as u32).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &hex::encode(self.0)[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest20 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest20({})", hex::encode(self.0))
    }
}

impl fmt::Debug for Preimage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Preimage(..)")
    }
}

pub(crate) mod hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(D::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| D::Error::custom(format!("expected {N} bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash160_known_vector() {
        // HASH160 of the empty string.
        assert_eq!(hex::encode(hash160(b"").0), "b472a266d0bd89c13706a4132ccfb16f7c3b9fcb");
    }

    #[test]
    fn tagged_hash_separates_domains() {
        assert_ne!(tagged_hash("a", &[b"bc"]), tagged_hash("ab", &[b"c"]));
    }
}
