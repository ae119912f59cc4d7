//! Nonce layout: `fingerprint[32] | branch_count:u16 | bits`, one bit per
//! select in pre-order, most significant bit first, zero-padded to a byte.

use sha2::{Digest, Sha256};

use super::capability::Capability;
use crate::error::{Error, Result};
use crate::proto::offer::encode_entries;
use crate::stack::CandidateStack;

pub type Fingerprint = [u8; 32];

/// SHA-256 over the canonical encodings of the given concrete stacks, in order.
/// Point-to-point connections hash `[client, server]`; rendezvous
/// connections hash the single stored stack.
pub fn fingerprint(stacks: &[&[Capability]]) -> Fingerprint {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(stacks.len() as u16).to_be_bytes());
    for s in stacks {
        encode_entries(s, &mut buf);
    }
    Sha256::digest(&buf).into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Nonce {
    pub fingerprint: Fingerprint,
    pub choice: CandidateStack,
}

impl Nonce {
    pub fn new(choice: CandidateStack, fingerprint: Fingerprint) -> Self {
        Nonce {
            fingerprint,
            choice,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_nonce(&self.choice, &self.fingerprint)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        decode_nonce(buf)
    }

    pub fn encoded_len(branches: usize) -> usize {
        34 + branches.div_ceil(8)
    }
}

pub fn encode_nonce(choice: &CandidateStack, fp: &Fingerprint) -> Vec<u8> {
    let n = choice.0.len();
    assert!(n <= u16::MAX as usize, "too many selects for a nonce");
    let mut out = Vec::with_capacity(Nonce::encoded_len(n));
    out.extend_from_slice(fp);
    out.extend_from_slice(&(n as u16).to_be_bytes());
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, &b) in choice.0.iter().enumerate() {
        assert!(b <= 1, "select branch index must be 0 or 1");
        if b == 1 {
            bits[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    out
}

pub fn decode_nonce(buf: &[u8]) -> Result<Nonce> {
    if buf.len() < 34 {
        return Err(Error::MalformedNonce(format!(
            "{} bytes, need >= 34",
            buf.len()
        )));
    }
    let fingerprint: Fingerprint = buf[..32].try_into().unwrap();
    let n = u16::from_be_bytes([buf[32], buf[33]]) as usize;
    let bits = &buf[34..];
    if bits.len() != n.div_ceil(8) {
        return Err(Error::MalformedNonce(format!(
            "{n} branches need {} bit bytes, got {}",
            n.div_ceil(8),
            bits.len()
        )));
    }
    if !n.is_multiple_of(8) {
        let pad_mask = 0xFFu8 >> (n % 8);
        if bits[bits.len() - 1] & pad_mask != 0 {
            return Err(Error::MalformedNonce("non-zero padding".into()));
        }
    }
    let choice = (0..n).map(|i| (bits[i / 8] >> (7 - i % 8)) & 1).collect();
    Ok(Nonce {
        fingerprint,
        choice: CandidateStack(choice),
    })
}
