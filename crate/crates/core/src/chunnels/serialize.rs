//! Record serialization in two deliberately incompatible layouts.
//!
//! fmtA: key_len u16 | key | value_len u32 | value | [group u32 | seq u64] | flag
//! fmtB: value_len u32 | value | key_len u16 | key | [group u32 | seq u64] | flag
//!
//! The presence flag is always the final byte and its values differ by
//! format (fmtA 0x00/0x01, fmtB 0x80/0x81), so a decoder rejects the other
//! format before reading any field.

use std::sync::Arc;

use async_trait::async_trait;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, DataType, Datapath, Msg, OrderTag, Record, TransferState};
use crate::error::{Error, Result};
use crate::negotiate::Capability;

pub const MAX_KEY: usize = u16::MAX as usize;
pub const MAX_VALUE: usize = 60 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    A,
    B,
}

impl Format {
    pub fn label(self) -> &'static str {
        match self {
            Format::A => "fmtA",
            Format::B => "fmtB",
        }
    }

    fn flag(self, present: bool) -> u8 {
        let base = match self {
            Format::A => 0x00,
            Format::B => 0x80,
        };
        base | present as u8
    }

    pub fn encode(self, r: &Record) -> Result<Vec<u8>> {
        if r.key.len() > MAX_KEY {
            return Err(Error::layer(
                "serialize",
                format!("key of {} bytes", r.key.len()),
            ));
        }
        if r.value.len() > MAX_VALUE {
            return Err(Error::layer(
                "serialize",
                format!("value of {} bytes", r.value.len()),
            ));
        }
        let mut out = Vec::with_capacity(r.key.len() + r.value.len() + 19);
        let key = |out: &mut Vec<u8>| {
            out.extend_from_slice(&(r.key.len() as u16).to_be_bytes());
            out.extend_from_slice(r.key.as_bytes());
        };
        let value = |out: &mut Vec<u8>| {
            out.extend_from_slice(&(r.value.len() as u32).to_be_bytes());
            out.extend_from_slice(&r.value);
        };
        match self {
            Format::A => {
                key(&mut out);
                value(&mut out);
            }
            Format::B => {
                value(&mut out);
                key(&mut out);
            }
        }
        if let Some(o) = r.order {
            out.extend_from_slice(&o.group.to_be_bytes());
            out.extend_from_slice(&o.seq.to_be_bytes());
        }
        out.push(self.flag(r.order.is_some()));
        Ok(out)
    }

    pub fn decode(self, buf: &[u8]) -> Result<Record> {
        let bad = |why: &str| Error::Decode(format!("{}: {why}", self.label()));
        let (&flag, body) = buf.split_last().ok_or_else(|| bad("empty"))?;
        let present = if flag == self.flag(false) {
            false
        } else if flag == self.flag(true) {
            true
        } else {
            return Err(bad("bad presence flag"));
        };
        let mut rest = body;
        let mut take = |n: usize| -> Result<&[u8]> {
            if rest.len() < n {
                return Err(bad("truncated"));
            }
            let (h, t) = rest.split_at(n);
            rest = t;
            Ok(h)
        };
        let mut key = None;
        let mut value = None;
        // 0 = key, 1 = value
        let fields: [u8; 2] = match self {
            Format::A => [0, 1],
            Format::B => [1, 0],
        };
        for field in fields {
            if field == 0 {
                let n = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
                let k = std::str::from_utf8(take(n)?).map_err(|_| bad("key is not UTF-8"))?;
                key = Some(k.to_string());
            } else {
                let n = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;
                if n > MAX_VALUE {
                    return Err(bad("value too long"));
                }
                value = Some(take(n)?.to_vec());
            }
        }
        let order = if present {
            let g = u32::from_be_bytes(take(4)?.try_into().unwrap());
            let s = u64::from_be_bytes(take(8)?.try_into().unwrap());
            Some(OrderTag { group: g, seq: s })
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Record {
            key: key.unwrap(),
            value: value.unwrap(),
            order,
        })
    }
}

pub struct Serialize {
    fmt: Format,
}

impl Serialize {
    pub fn new(fmt: Format) -> Arc<Self> {
        Arc::new(Serialize { fmt })
    }
}

#[async_trait]
impl Chunnel for Serialize {
    fn name(&self) -> &str {
        match self.fmt {
            Format::A => "serialize-fmtA",
            Format::B => "serialize-fmtB",
        }
    }

    fn accepts(&self) -> Accepts {
        Accepts::Exactly(DataType::Bytes)
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Record)
    }

    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::exact("serialize", [self.fmt.label()])]
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        match lower {
            Lower::Conn(inner) if inner.data_type() == DataType::Bytes => {
                Ok(Arc::new(SerializeConn {
                    inner,
                    fmt: self.fmt,
                }))
            }
            _ => Err(Error::layer("serialize", "needs a byte connection")),
        }
    }
}

pub struct SerializeConn {
    inner: Conn,
    fmt: Format,
}

#[async_trait]
impl Datapath for SerializeConn {
    fn data_type(&self) -> DataType {
        DataType::Record
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        let out = batch
            .into_iter()
            .map(|m| {
                let (addr, r) = m.into_record("serialize")?;
                Ok(Msg::bytes(addr, self.fmt.encode(&r)?))
            })
            .collect::<Result<Vec<_>>>()?;
        self.inner.send(out).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let n = self.inner.recv(slots).await?;
        let mut err = None;
        for slot in slots[..n].iter_mut() {
            if let Some(m) = slot.take() {
                let (addr, b) = m.into_bytes("serialize")?;
                match self.fmt.decode(&b) {
                    Ok(r) => *slot = Some(Msg::record(addr, r)),
                    Err(e) => err = Some(e),
                }
            }
        }
        match err {
            Some(e) => Err(e),
            None => Ok(n),
        }
    }

    fn export_state(&self) -> Result<Option<TransferState>> {
        Ok(None)
    }

    fn import_state(&self, _st: TransferState) -> Result<()> {
        Ok(())
    }
}
