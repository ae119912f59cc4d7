//! Frame layout (all integers big-endian):
//!
//! ```text
//! tag:u8 | flags:u8 (=0) | conn_id:u64 | seq:u64 | len:u32 | payload[len]
//! ```

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 22;
pub const MAX_PAYLOAD: usize = u32::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tag {
    Data = 0x00,
    Hello = 0x01,
    Accept = 0x02,
    Reject = 0x03,
    ZrttHello = 0x04,
    ZrttFail = 0x05,
    Prepare = 0x06,
    Vote = 0x07,
    Commit = 0x08,
    Abort = 0x09,
    Ack = 0x0A,
}

impl Tag {
    pub fn from_u8(b: u8) -> Option<Tag> {
        use Tag::*;
        Some(match b {
            0x00 => Data,
            0x01 => Hello,
            0x02 => Accept,
            0x03 => Reject,
            0x04 => ZrttHello,
            0x05 => ZrttFail,
            0x06 => Prepare,
            0x07 => Vote,
            0x08 => Commit,
            0x09 => Abort,
            0x0A => Ack,
            _ => return None,
        })
    }

    /// Control frames go through the reliable channel; DATA and ACK do not.
    pub fn is_reliable_control(self) -> bool {
        !matches!(self, Tag::Data | Tag::Ack)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub conn_id: u64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: Tag, conn_id: u64, seq: u64, payload: Vec<u8>) -> Self {
        Frame {
            tag,
            conn_id,
            seq,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        assert!(
            self.payload.len() <= MAX_PAYLOAD,
            "frame payload exceeds u32"
        );
        out.push(self.tag as u8);
        out.push(0);
        out.extend_from_slice(&self.conn_id.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn decode(buf: &[u8]) -> Result<Frame> {
        let (h, len) = Header::parse(buf)?;
        let body = &buf[HEADER_LEN..];
        if body.len() != len {
            return Err(Error::MalformedFrame(format!(
                "declared length {len}, {} bytes available",
                body.len()
            )));
        }
        Ok(Frame {
            tag: h.tag,
            conn_id: h.conn_id,
            seq: h.seq,
            payload: body.to_vec(),
        })
    }
}

/// Parsed fixed header, for stream transports that read the payload separately.
#[derive(Debug, Clone, Copy)]
pub struct Header {
    pub tag: Tag,
    pub conn_id: u64,
    pub seq: u64,
}

impl Header {
    /// Returns the header and declared payload length.
    pub fn parse(buf: &[u8]) -> Result<(Header, usize)> {
        if buf.len() < HEADER_LEN {
            return Err(Error::MalformedFrame(format!(
                "{} bytes, header needs {HEADER_LEN}",
                buf.len()
            )));
        }
        let tag = Tag::from_u8(buf[0])
            .ok_or_else(|| Error::MalformedFrame(format!("unknown tag {:#04x}", buf[0])))?;
        if buf[1] != 0 {
            return Err(Error::MalformedFrame("reserved flags set".into()));
        }
        let conn_id = u64::from_be_bytes(buf[2..10].try_into().unwrap());
        let seq = u64::from_be_bytes(buf[10..18].try_into().unwrap());
        let len = u32::from_be_bytes(buf[18..22].try_into().unwrap()) as usize;
        Ok((Header { tag, conn_id, seq }, len))
    }
}
