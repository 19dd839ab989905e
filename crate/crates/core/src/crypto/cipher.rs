//! Authenticated encryption with explicit nonces (ChaCha20-Poly1305).

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use serde::{Deserialize, Serialize};

use super::hash::Digest;
use super::CryptoError;

pub const IV_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CipherPacket {
    #[serde(with = "super::hash::hex_array")]
    pub iv: [u8; IV_LEN],
    #[serde(with = "hex::serde")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "super::hash::hex_array")]
    pub tag: [u8; TAG_LEN],
}

impl CipherPacket {
    pub fn encoded_len(&self) -> usize {
        IV_LEN + self.ciphertext.len() + TAG_LEN
    }

    /// `iv || ciphertext || tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<CipherPacket, CryptoError> {
        if b.len() < IV_LEN + TAG_LEN {
            return Err(CryptoError::IntegrityFailure);
        }
        let mut iv = [0u8; IV_LEN];
        iv.copy_from_slice(&b[..IV_LEN]);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&b[b.len() - TAG_LEN..]);
        Ok(CipherPacket { iv, ciphertext: b[IV_LEN..b.len() - TAG_LEN].to_vec(), tag })
    }
}

pub fn encrypt(key: &Digest, payload: &[u8], iv: [u8; IV_LEN]) -> CipherPacket {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut sealed = cipher
        .encrypt(Nonce::from_slice(&iv), payload)
        .expect("in-memory encryption cannot fail");
    let tag_bytes = sealed.split_off(sealed.len() - TAG_LEN);
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&tag_bytes);
    CipherPacket { iv, ciphertext: sealed, tag }
}

pub fn decrypt(key: &Digest, packet: &CipherPacket) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut sealed = packet.ciphertext.clone();
    sealed.extend_from_slice(&packet.tag);
    cipher
        .decrypt(Nonce::from_slice(&packet.iv), sealed.as_slice())
        .map_err(|_| CryptoError::IntegrityFailure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::sha256;

    #[test]
    fn roundtrip() {
        let k = sha256(b"k");
        let p = encrypt(&k, b"punish pair", [1; IV_LEN]);
        assert_eq!(p.ciphertext.len(), 11);
        assert_eq!(decrypt(&k, &p).unwrap(), b"punish pair");
    }

    #[test]
    fn fresh_iv_changes_bytes() {
        let k = sha256(b"k");
        let a = encrypt(&k, b"same", [1; IV_LEN]);
        let b = encrypt(&k, b"same", [2; IV_LEN]);
        assert_ne!(a.to_bytes(), b.to_bytes());
        assert_eq!(decrypt(&k, &a).unwrap(), decrypt(&k, &b).unwrap());
    }

    #[test]
    fn wrong_key_fails() {
        let p = encrypt(&sha256(b"k"), b"x", [0; IV_LEN]);
        assert!(matches!(decrypt(&sha256(b"k2"), &p), Err(CryptoError::IntegrityFailure)));
    }

    #[test]
    fn byte_form_roundtrip() {
        let p = encrypt(&sha256(b"k"), &[7u8; 130], [3; IV_LEN]);
        assert_eq!(CipherPacket::from_bytes(&p.to_bytes()).unwrap(), p);
        assert_eq!(p.encoded_len(), 12 + 130 + 16);
    }
}
