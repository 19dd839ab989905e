//! Abstract signing keys and two-party covenant signatures.
//!
//! Signatures are keyed MACs. Verification goes through a [`KeyRegistry`]
//! that plays the role of the consensus-level verifier: it maps each public
//! key identifier to its MAC key. Only the chain and the key owners hold a
//! registry handle with secrets; scripts and transactions carry public
//! identifiers only.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::hash::{tagged_hash, Digest};
use super::CryptoError;
use crate::channel::PeerRole;

type HmacSha256 = Hmac<Sha256>;

/// Length of an aggregated covenant signature in bytes: two 32-byte
/// partials plus the path byte.
pub const COVENANT_SIG_LEN: usize = 65;

/// Public identifier of a single signing key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PublicKeyId(pub Digest);

/// A single-party signing key.
#[derive(Clone)]
pub struct SigningKey {
    secret: [u8; 32],
    id: PublicKeyId,
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SigningKey({:?})", self.id)
    }
}

impl SigningKey {
    pub fn from_seed(seed: &[u8]) -> SigningKey {
        let secret = tagged_hash("key/secret", &[seed]).0;
        let id = PublicKeyId(tagged_hash("key/public", &[&secret]));
        SigningKey { secret, id }
    }

    pub fn public(&self) -> PublicKeyId {
        self.id
    }

    fn mac(&self, msg: &[u8]) -> [u8; 32] {
        mac_with(&self.secret, msg)
    }

    /// Single-key signature over a transaction digest (checked by `CSIGV`).
    pub fn sign(&self, sighash: &Digest) -> Signature {
        Signature { key: self.id, mac: self.mac(&single_msg(&self.id, sighash)) }
    }

    /// This party's share of a covenant signature.
    pub fn partial_covenant(&self, keyset: &CovenantKeySet, sighash: &Digest, path: u8) -> PartialCovenantSig {
        let role = if keyset.alice == self.id {
            PeerRole::Alice
        } else {
            PeerRole::Bob
        };
        PartialCovenantSig { role, mac: self.mac(&covenant_msg(keyset, sighash, path)) }
    }
}

fn mac_with(secret: &[u8; 32], msg: &[u8]) -> [u8; 32] {
    let mut m = <HmacSha256 as Mac>::new_from_slice(secret).expect("hmac accepts any key length");
    m.update(msg);
    m.finalize().into_bytes().into()
}

fn single_msg(key: &PublicKeyId, sighash: &Digest) -> Vec<u8> {
    let mut v = b"sig/single".to_vec();
    v.extend_from_slice(&key.0 .0);
    v.extend_from_slice(&sighash.0);
    v
}

fn covenant_msg(keyset: &CovenantKeySet, sighash: &Digest, path: u8) -> Vec<u8> {
    let mut v = b"sig/covenant".to_vec();
    v.extend_from_slice(&keyset.id().0);
    v.extend_from_slice(&sighash.0);
    v.push(path);
    v
}

/// A single-party signature.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub key: PublicKeyId,
    #[serde(with = "super::hash::hex_array")]
    pub mac: [u8; 32],
}

/// The two channel owners' keys that must both approve a covenant path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovenantKeySet {
    pub alice: PublicKeyId,
    pub bob: PublicKeyId,
}

impl CovenantKeySet {
    pub fn id(&self) -> Digest {
        tagged_hash("covenant/keyset", &[&self.alice.0 .0, &self.bob.0 .0])
    }
}

/// One owner's contribution to a covenant signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartialCovenantSig {
    pub role: PeerRole,
    #[serde(with = "super::hash::hex_array")]
    pub mac: [u8; 32],
}

/// Aggregate approval of both owners for one transaction digest and one
/// script path. Serializes to exactly [`COVENANT_SIG_LEN`] bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovenantSignature {
    #[serde(with = "super::hash::hex_array")]
    pub alice: [u8; 32],
    #[serde(with = "super::hash::hex_array")]
    pub bob: [u8; 32],
    pub path: u8,
}

impl CovenantSignature {
    /// Combines both owners' partials.
    pub fn aggregate(
        path: u8,
        partials: &[PartialCovenantSig],
    ) -> Result<CovenantSignature, CryptoError> {
        let find = |r: PeerRole| {
            partials
                .iter()
                .find(|p| p.role == r)
                .map(|p| p.mac)
                .ok_or(CryptoError::MissingConsent(r))
        };
        Ok(CovenantSignature { alice: find(PeerRole::Alice)?, bob: find(PeerRole::Bob)?, path })
    }

    pub fn to_bytes(&self) -> [u8; COVENANT_SIG_LEN] {
        let mut out = [0u8; COVENANT_SIG_LEN];
        out[..32].copy_from_slice(&self.alice);
        out[32..64].copy_from_slice(&self.bob);
        out[64] = self.path;
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<CovenantSignature, CryptoError> {
        if b.len() != COVENANT_SIG_LEN {
            return Err(CryptoError::MalformedSignature("covenant length"));
        }
        let mut alice = [0u8; 32];
        let mut bob = [0u8; 32];
        alice.copy_from_slice(&b[..32]);
        bob.copy_from_slice(&b[32..64]);
        Ok(CovenantSignature { alice, bob, path: b[64] })
    }
}

/// Simulation-trusted verifier holding the MAC keys of every registered
/// signer. Cheap to clone; clones share the same table.
#[derive(Clone, Default)]
pub struct KeyRegistry {
    keys: Arc<RwLock<HashMap<PublicKeyId, [u8; 32]>>>,
}

impl std::fmt::Debug for KeyRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.keys.read().map(|k| k.len()).unwrap_or(0);
        write!(f, "KeyRegistry({n} keys)")
    }
}

impl KeyRegistry {
    pub fn new() -> KeyRegistry {
        KeyRegistry::default()
    }

    pub fn register(&self, key: &SigningKey) {
        self.keys.write().expect("registry lock").insert(key.id, key.secret);
    }

    fn secret(&self, id: &PublicKeyId) -> Option<[u8; 32]> {
        self.keys.read().expect("registry lock").get(id).copied()
    }

    pub fn verify(&self, sig: &Signature, expected: &PublicKeyId, sighash: &Digest) -> bool {
        if sig.key != *expected {
            return false;
        }
        match self.secret(expected) {
            Some(s) => mac_with(&s, &single_msg(expected, sighash)) == sig.mac,
            None => false,
        }
    }

    pub fn verify_partial(
        &self,
        keyset: &CovenantKeySet,
        partial: &PartialCovenantSig,
        sighash: &Digest,
        path: u8,
    ) -> bool {
        let id = match partial.role {
            PeerRole::Alice => keyset.alice,
            PeerRole::Bob => keyset.bob,
        };
        match self.secret(&id) {
            Some(s) => mac_with(&s, &covenant_msg(keyset, sighash, path)) == partial.mac,
            None => false,
        }
    }

    /// True only for the exact (keyset, digest, path) the signature was made for.
    pub fn verify_covenant(
        &self,
        keyset: &CovenantKeySet,
        sig: &CovenantSignature,
        sighash: &Digest,
        path: u8,
    ) -> bool {
        if sig.path != path {
            return false;
        }
        let msg = covenant_msg(keyset, sighash, path);
        match (self.secret(&keyset.alice), self.secret(&keyset.bob)) {
            (Some(a), Some(b)) => mac_with(&a, &msg) == sig.alice && mac_with(&b, &msg) == sig.bob,
            _ => false,
        }
    }
}

/// Signs with both keys at once; used by builders and tests that act for
/// both owners.
pub fn covenant_sign(
    keyset: &CovenantKeySet,
    alice: &SigningKey,
    bob: &SigningKey,
    sighash: &Digest,
    path: u8,
) -> Result<CovenantSignature, CryptoError> {
    CovenantSignature::aggregate(
        path,
        &[alice.partial_covenant(keyset, sighash, path), bob.partial_covenant(keyset, sighash, path)],
    )
}
