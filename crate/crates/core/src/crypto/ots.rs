//! Winternitz-style one-time signatures over fixed-width sequence numbers.
//!
//! A value is split into base-`2^chunk_bits` message digits followed by a
//! checksum of the complementary digit sum. Each digit owns a hash chain of
//! length `2^chunk_bits - 1`; the signature reveals the chain element at
//! the digit's position. Raising any message digit lowers the checksum, so
//! a forger would have to invert the hash on at least one chain.
//!
//! Unlike textbook WOTS the signature carries its digit vector, so a
//! verifier (and the script engine) can read the signed value back without
//! being told it.

use serde::{Deserialize, Serialize};

use super::hash::{sha256, tagged_hash, Digest};
use super::CryptoError;

/// Shape of a one-time key: how many bits are signed and how wide each
/// chain digit is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OtsParams {
    pub value_bits: u32,
    pub chunk_bits: u32,
}

impl Default for OtsParams {
    fn default() -> Self {
        OtsParams { value_bits: 32, chunk_bits: 4 }
    }
}

impl OtsParams {
    pub fn new(value_bits: u32, chunk_bits: u32) -> Result<Self, CryptoError> {
        let p = OtsParams { value_bits, chunk_bits };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CryptoError> {
        if self.chunk_bits == 0
            || self.chunk_bits > 8
            || self.value_bits == 0
            || self.value_bits > 32
            || !self.value_bits.is_multiple_of(self.chunk_bits)
        {
            return Err(CryptoError::InvalidParams {
                value_bits: self.value_bits,
                chunk_bits: self.chunk_bits,
            });
        }
        Ok(())
    }

    /// Largest digit value, which is also the chain length.
    pub fn max_digit(&self) -> u32 {
        (1u32 << self.chunk_bits) - 1
    }

    pub fn message_digits(&self) -> usize {
        (self.value_bits / self.chunk_bits) as usize
    }

    /// Base-`2^chunk_bits` digits needed to write the largest possible checksum.
    pub fn checksum_digits(&self) -> usize {
        let max_sum = self.message_digits() as u64 * self.max_digit() as u64;
        let base = 1u64 << self.chunk_bits;
        let mut digits = 1;
        let mut cap = base;
        while cap <= max_sum {
            cap *= base;
            digits += 1;
        }
        digits
    }

    pub fn total_digits(&self) -> usize {
        self.message_digits() + self.checksum_digits()
    }

    /// Number of distinct values representable (2^value_bits).
    pub fn capacity(&self) -> u64 {
        1u64 << self.value_bits
    }

    /// Full digit vector (message then checksum) for `value`.
    pub fn encode(&self, value: u32) -> Result<Vec<u8>, CryptoError> {
        if (value as u64) >= self.capacity() {
            return Err(CryptoError::ValueOutOfRange { value, bits: self.value_bits });
        }
        let n1 = self.message_digits();
        let mask = self.max_digit();
        let mut digits = Vec::with_capacity(self.total_digits());
        for k in (0..n1).rev() {
            digits.push(((value >> (k as u32 * self.chunk_bits)) & mask) as u8);
        }
        let checksum: u64 = digits.iter().map(|&d| (mask - d as u32) as u64).sum();
        let n2 = self.checksum_digits();
        for k in (0..n2).rev() {
            digits.push(((checksum >> (k as u32 * self.chunk_bits)) & mask as u64) as u8);
        }
        Ok(digits)
    }

    /// Inverse of [`encode`](Self::encode); rejects vectors whose checksum
    /// does not match their message digits.
    pub fn decode(&self, digits: &[u8]) -> Result<u32, CryptoError> {
        if digits.len() != self.total_digits() {
            return Err(CryptoError::MalformedSignature("digit count"));
        }
        if digits.iter().any(|&d| d as u32 > self.max_digit()) {
            return Err(CryptoError::MalformedSignature("digit range"));
        }
        let mut value: u64 = 0;
        for &d in &digits[..self.message_digits()] {
            value = (value << self.chunk_bits) | d as u64;
        }
        let value = value as u32;
        if self.encode(value)? != digits {
            return Err(CryptoError::MalformedSignature("checksum"));
        }
        Ok(value)
    }
}

fn chain(mut x: Digest, steps: u32) -> Digest {
    for _ in 0..steps {
        x = sha256(&x.0);
    }
    x
}

/// Public half of a one-time key: one chain end per digit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OtsPublicKey {
    pub params: OtsParams,
    pub chain_ends: Vec<Digest>,
}

impl OtsPublicKey {
    /// Compact identifier used in logs and disassembly.
    pub fn fingerprint(&self) -> Digest {
        let mut parts: Vec<&[u8]> = Vec::with_capacity(self.chain_ends.len());
        for d in &self.chain_ends {
            parts.push(&d.0);
        }
        tagged_hash("ots/pub", &parts)
    }

    pub fn verify(&self, value: u32, sig: &OtsSignature) -> bool {
        match self.params.encode(value) {
            Ok(digits) => digits == sig.digits && self.check_chains(sig),
            Err(_) => false,
        }
    }

    /// Returns the value a valid signature encodes.
    pub fn recover_value(&self, sig: &OtsSignature) -> Result<u32, CryptoError> {
        let value = self.params.decode(&sig.digits)?;
        if !self.check_chains(sig) {
            return Err(CryptoError::SignatureInvalid);
        }
        Ok(value)
    }

    fn check_chains(&self, sig: &OtsSignature) -> bool {
        let max = self.params.max_digit();
        sig.chain_values.len() == self.chain_ends.len()
            && sig.digits.len() == self.chain_ends.len()
            && sig
                .digits
                .iter()
                .zip(&sig.chain_values)
                .zip(&self.chain_ends)
                .all(|((&d, v), end)| d as u32 <= max && chain(*v, max - d as u32) == *end)
    }
}

/// A one-time signature: the digit vector plus one intermediate chain value
/// per digit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OtsSignature {
    pub digits: Vec<u8>,
    pub chain_values: Vec<Digest>,
}

impl OtsSignature {
    pub fn encoded_len(&self) -> usize {
        4 + self.digits.len() + 32 * self.chain_values.len()
    }
}

/// A one-time key pair. Signing latches the value so a second, different
/// value is refused.
#[derive(Clone, Debug)]
pub struct OtsKeyPair {
    params: OtsParams,
    private: Vec<Digest>,
    public: OtsPublicKey,
    used_value: Option<u32>,
}

impl OtsKeyPair {
    pub fn generate(params: OtsParams, seed: &[u8; 32]) -> Result<Self, CryptoError> {
        params.validate()?;
        let private: Vec<Digest> = (0..params.total_digits() as u32)
            .map(|d| tagged_hash("ots/sk", &[seed, &d.to_le_bytes()]))
            .collect();
        let chain_ends = private.iter().map(|sk| chain(*sk, params.max_digit())).collect();
        Ok(OtsKeyPair {
            params,
            private,
            public: OtsPublicKey { params, chain_ends },
            used_value: None,
        })
    }

    pub fn params(&self) -> OtsParams {
        self.params
    }

    pub fn public(&self) -> &OtsPublicKey {
        &self.public
    }

    pub fn used_value(&self) -> Option<u32> {
        self.used_value
    }

    /// Signs `value`. Re-signing the same value is allowed; signing a
    /// different one is a protocol violation and returns `KeyReuse`.
    pub fn sign(&mut self, value: u32) -> Result<OtsSignature, CryptoError> {
        if let Some(prev) = self.used_value {
            if prev != value {
                return Err(CryptoError::KeyReuse { signed: prev, requested: value });
            }
        }
        let digits = self.params.encode(value)?;
        let chain_values = digits
            .iter()
            .zip(&self.private)
            .map(|(&d, sk)| chain(*sk, d as u32))
            .collect();
        self.used_value = Some(value);
        Ok(OtsSignature { digits, chain_values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn key(seed: u8) -> OtsKeyPair {
        OtsKeyPair::generate(OtsParams::default(), &[seed; 32]).unwrap()
    }

    #[test]
    fn default_digit_layout() {
        let p = OtsParams::default();
        assert_eq!(p.message_digits(), 8);
        // max checksum 8 * 15 = 120 < 256 -> two base-16 digits
        assert_eq!(p.checksum_digits(), 2);
        assert_eq!(p.capacity(), 4_294_967_296);
    }

    #[test]
    fn checksum_digits_for_small_chunks() {
        // 32 digits * 1 = 32 needs 6 bits.
        assert_eq!(OtsParams::new(32, 1).unwrap().checksum_digits(), 6);
        // 16 digits * 3 = 48 needs 3 base-4 digits.
        assert_eq!(OtsParams::new(32, 2).unwrap().checksum_digits(), 3);
    }

    #[test]
    fn rejects_indivisible_params() {
        assert!(matches!(OtsParams::new(32, 3), Err(CryptoError::InvalidParams { .. })));
        assert!(OtsKeyPair::generate(OtsParams { value_bits: 30, chunk_bits: 4 }, &[0; 32]).is_err());
    }

    #[test]
    fn keygen_is_deterministic() {
        assert_eq!(key(9).public(), key(9).public());
        assert_ne!(key(9).public(), key(10).public());
    }

    #[test]
    fn sign_verify_and_recover() {
        let mut k = key(1);
        let sig = k.sign(50).unwrap();
        assert!(k.public().verify(50, &sig));
        assert!(!k.public().verify(51, &sig));
        assert_eq!(k.public().recover_value(&sig).unwrap(), 50);
    }

    #[test]
    fn zero_value() {
        let mut k = key(2);
        let sig = k.sign(0).unwrap();
        assert_eq!(k.public().recover_value(&sig).unwrap(), 0);
    }

    #[test]
    fn one_time_latch() {
        let mut k = key(3);
        k.sign(50).unwrap();
        assert!(k.sign(50).is_ok());
        assert!(matches!(k.sign(100), Err(CryptoError::KeyReuse { signed: 50, requested: 100 })));
    }

    #[test]
    fn out_of_range_value() {
        let mut k = OtsKeyPair::generate(OtsParams::new(8, 4).unwrap(), &[0; 32]).unwrap();
        assert!(matches!(k.sign(256), Err(CryptoError::ValueOutOfRange { .. })));
    }

    #[test]
    fn random_roundtrip_sample() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut k = OtsKeyPair::generate(OtsParams::default(), &rng.gen()).unwrap();
            let v: u32 = rng.gen();
            let sig = k.sign(v).unwrap();
            assert!(k.public().verify(v, &sig));
        }
    }

    #[test]
    fn tampered_chain_value_fails() {
        let mut k = key(4);
        let mut sig = k.sign(77).unwrap();
        sig.chain_values[3].0[0] ^= 1;
        assert!(!k.public().verify(77, &sig));
        assert!(k.public().recover_value(&sig).is_err());
    }

    #[test]
    fn bad_checksum_is_malformed() {
        let mut k = key(5);
        let mut sig = k.sign(77).unwrap();
        let last = sig.digits.len() - 1;
        sig.digits[last] ^= 1;
        assert!(matches!(
            k.public().recover_value(&sig),
            Err(CryptoError::MalformedSignature("checksum"))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn recover_is_inverse_of_sign(v in any::<u32>(), chunk in prop::sample::select(vec![1u32, 2, 4, 8])) {
            let mut k = OtsKeyPair::generate(OtsParams::new(32, chunk).unwrap(), &[11; 32]).unwrap();
            let sig = k.sign(v).unwrap();
            prop_assert_eq!(k.public().recover_value(&sig).unwrap(), v);
        }

        #[test]
        fn encode_decode_roundtrip(v in any::<u32>()) {
            let p = OtsParams::default();
            prop_assert_eq!(p.decode(&p.encode(v).unwrap()).unwrap(), v);
        }
    }
}
