//! Canonical encoding of candidate-stack offers.
//!
//! ```text
//! offer     := count:u16 candidate*
//! candidate := count:u16 entry*
//! entry     := universe:str mode:u8 count:u16 label:str*
//! str       := len:u16 utf8[len]
//! ```
//!
//! Labels are written in ascending byte order with no duplicates, so equal
//! offers always produce identical bytes. The decoder rejects anything else.

use std::collections::BTreeSet;

use super::wire::{put_str, put_u16, Reader};
use crate::error::{Error, Result};
use crate::negotiate::{Capability, MatchMode};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OfferPayload {
    pub candidates: Vec<Vec<Capability>>,
}

impl OfferPayload {
    pub fn new(candidates: Vec<Vec<Capability>>) -> Self {
        OfferPayload { candidates }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        assert!(self.candidates.len() <= u16::MAX as usize);
        put_u16(out, self.candidates.len() as u16);
        for c in &self.candidates {
            encode_entries(c, out);
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, Error::MalformedOffer);
        let o = Self::read(&mut r)?;
        r.finish()?;
        Ok(o)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.u16()?;
        let mut candidates = Vec::with_capacity(n as usize);
        for _ in 0..n {
            candidates.push(read_entries(r)?);
        }
        Ok(OfferPayload { candidates })
    }
}

/// Encode one concrete stack's capability list.
pub fn encode_entries(caps: &[Capability], out: &mut Vec<u8>) {
    assert!(caps.len() <= u16::MAX as usize);
    put_u16(out, caps.len() as u16);
    for c in caps {
        put_str(out, &c.universe);
        out.push(c.mode.wire());
        put_u16(out, c.labels.len() as u16);
        for l in &c.labels {
            put_str(out, l);
        }
    }
}

pub fn encode_stack(caps: &[Capability]) -> Vec<u8> {
    let mut out = Vec::new();
    encode_entries(caps, &mut out);
    out
}

pub fn decode_stack(buf: &[u8]) -> Result<Vec<Capability>> {
    let mut r = Reader::new(buf, Error::MalformedOffer);
    let caps = read_entries(&mut r)?;
    r.finish()?;
    Ok(caps)
}

pub(crate) fn read_entries(r: &mut Reader<'_>) -> Result<Vec<Capability>> {
    let n = r.u16()?;
    let mut caps = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let universe = r.str()?.to_string();
        let mode = MatchMode::from_wire(r.u8()?).ok_or_else(|| r.fail("bad match mode"))?;
        let count = r.u16()?;
        if count == 0 {
            return Err(r.fail("empty label set"));
        }
        let mut labels = BTreeSet::new();
        let mut prev: Option<&str> = None;
        for _ in 0..count {
            let l = r.str()?;
            if prev.is_some_and(|p| p >= l) {
                return Err(r.fail("labels not strictly ascending"));
            }
            prev = Some(l);
            labels.insert(l.to_string());
        }
        caps.push(Capability {
            universe,
            mode,
            labels,
        });
    }
    Ok(caps)
}
