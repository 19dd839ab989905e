//! Canonical little-endian byte encoding used for txids, sighashes, record
//! sizes and the tower wire format.

use crate::crypto::{CovenantSignature, Digest, Digest20, OtsPublicKey, OtsSignature, Preimage, PublicKeyId, Signature};

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Encoder {
        Encoder::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// u32 length prefix followed by the bytes.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.raw(v)
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.raw(&d.0)
    }

    pub fn digest20(&mut self, d: &Digest20) -> &mut Self {
        self.raw(&d.0)
    }

    pub fn key_id(&mut self, k: &PublicKeyId) -> &mut Self {
        self.digest(&k.0)
    }

    pub fn ots_public(&mut self, k: &OtsPublicKey) -> &mut Self {
        self.u32(k.params.value_bits).u32(k.params.chunk_bits).u32(k.chain_ends.len() as u32);
        for d in &k.chain_ends {
            self.digest(d);
        }
        self
    }

    pub fn ots_sig(&mut self, s: &OtsSignature) -> &mut Self {
        self.bytes(&s.digits);
        for d in &s.chain_values {
            self.digest(d);
        }
        self
    }

    pub fn covenant_sig(&mut self, s: &CovenantSignature) -> &mut Self {
        self.raw(&s.to_bytes())
    }

    pub fn signature(&mut self, s: &Signature) -> &mut Self {
        self.key_id(&s.key).raw(&s.mac)
    }

    pub fn preimage(&mut self, p: &Preimage) -> &mut Self {
        self.raw(&p.0)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice; every read is bounds checked.
#[derive(Debug)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("truncated input at byte {0}")]
pub struct Truncated(pub usize);

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Decoder<'a> {
        Decoder { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        if self.data.len() - self.pos < n {
            return Err(Truncated(self.pos));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], Truncated> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn digest(&mut self) -> Result<Digest, Truncated> {
        Ok(Digest(self.take(32)?.try_into().expect("32 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}
