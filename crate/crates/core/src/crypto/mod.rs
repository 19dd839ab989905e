//! Hashing, one-time signatures, covenant signatures, authenticated
//! encryption and hash chains.

mod cipher;
mod covenant;
mod hash;
mod hashchain;
mod ots;

pub use cipher::{decrypt, encrypt, CipherPacket, IV_LEN, TAG_LEN};
pub use covenant::{
    covenant_sign, CovenantKeySet, CovenantSignature, KeyRegistry, PartialCovenantSig, PublicKeyId,
    Signature, SigningKey, COVENANT_SIG_LEN,
};
pub use hash::{hash160, sha256, tagged_hash, Digest, Digest20, Preimage};
pub use hashchain::{derive_from, walk_down, HashChain, MAX_CHAIN_LENGTH};
pub use ots::{OtsKeyPair, OtsParams, OtsPublicKey, OtsSignature};

use thiserror::Error;

use crate::channel::PeerRole;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid OTS parameters: {value_bits} bits in {chunk_bits}-bit chunks")]
    InvalidParams { value_bits: u32, chunk_bits: u32 },
    #[error("value {value} does not fit in {bits} bits")]
    ValueOutOfRange { value: u32, bits: u32 },
    #[error("one-time key already signed {signed}, refusing {requested}")]
    KeyReuse { signed: u32, requested: u32 },
    #[error("malformed signature: {0}")]
    MalformedSignature(&'static str),
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error("missing covenant consent from {0:?}")]
    MissingConsent(PeerRole),
    #[error("ciphertext failed authentication")]
    IntegrityFailure,
    #[error("hash chain index {index} beyond {length}")]
    ChainIndex { index: u32, length: u32 },
    #[error("unsupported hash chain length {0}")]
    ChainLength(u32),
}
