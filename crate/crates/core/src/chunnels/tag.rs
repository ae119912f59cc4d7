//! Epoch stamping for swap-safety checks.
//!
//! On send the layer prepends a stamp naming its implementation and the
//! stack epoch it was built for; on receive it appends one. A message whose
//! stamps disagree was handled by layers from different epochs.

use std::sync::Arc;

use async_trait::async_trait;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, DataType, Datapath, Msg, TransferState};
use crate::error::{Error, Result};

pub const STAMP_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stamp {
    pub impl_id: u8,
    pub epoch: u64,
}

impl Stamp {
    pub fn encode(&self) -> [u8; STAMP_LEN] {
        let mut b = [0u8; STAMP_LEN];
        b[0] = self.impl_id;
        b[1..].copy_from_slice(&self.epoch.to_be_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Stamp> {
        if b.len() < STAMP_LEN {
            return Err(Error::Decode("short stamp".into()));
        }
        Ok(Stamp {
            impl_id: b[0],
            epoch: u64::from_be_bytes(b[1..STAMP_LEN].try_into().unwrap()),
        })
    }
}

/// Split `n` leading stamps off a payload.
pub fn take_prefix(buf: &[u8], n: usize) -> Result<(Vec<Stamp>, &[u8])> {
    if buf.len() < n * STAMP_LEN {
        return Err(Error::Decode("missing send stamps".into()));
    }
    let stamps = (0..n)
        .map(|i| Stamp::decode(&buf[i * STAMP_LEN..]))
        .collect::<Result<_>>()?;
    Ok((stamps, &buf[n * STAMP_LEN..]))
}

/// Split `n` trailing stamps off a payload, innermost first.
pub fn take_suffix(buf: &[u8], n: usize) -> Result<(&[u8], Vec<Stamp>)> {
    if buf.len() < n * STAMP_LEN {
        return Err(Error::Decode("missing receive stamps".into()));
    }
    let split = buf.len() - n * STAMP_LEN;
    let stamps = (0..n)
        .map(|i| Stamp::decode(&buf[split + i * STAMP_LEN..]))
        .collect::<Result<_>>()?;
    Ok((&buf[..split], stamps))
}

pub struct TagChunnel {
    name: String,
    impl_id: u8,
}

impl TagChunnel {
    pub fn new(name: impl Into<String>, impl_id: u8) -> Arc<Self> {
        Arc::new(TagChunnel {
            name: name.into(),
            impl_id,
        })
    }
}

#[async_trait]
impl Chunnel for TagChunnel {
    fn name(&self) -> &str {
        &self.name
    }

    fn accepts(&self) -> Accepts {
        Accepts::Exactly(DataType::Bytes)
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Bytes)
    }

    async fn connect_wrap(&self, lower: Lower, cx: &WrapContext) -> Result<Conn> {
        match lower {
            Lower::Conn(inner) => Ok(Arc::new(TagConn {
                inner,
                stamp: Stamp {
                    impl_id: self.impl_id,
                    epoch: cx.epoch,
                },
            })),
            Lower::Unit => Err(Error::NoBootstrapLayer),
        }
    }
}

pub struct TagConn {
    inner: Conn,
    stamp: Stamp,
}

#[async_trait]
impl Datapath for TagConn {
    fn data_type(&self) -> DataType {
        DataType::Bytes
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        let s = self.stamp.encode();
        let batch = batch
            .into_iter()
            .map(|m| {
                let (addr, b) = m.into_bytes("tag")?;
                let mut out = Vec::with_capacity(b.len() + STAMP_LEN);
                out.extend_from_slice(&s);
                out.extend_from_slice(&b);
                Ok(Msg::bytes(addr, out))
            })
            .collect::<Result<Vec<_>>>()?;
        self.inner.send(batch).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let n = self.inner.recv(slots).await?;
        let s = self.stamp.encode();
        for m in slots[..n].iter_mut().flatten() {
            if let crate::datapath::Data::Bytes(b) = &mut m.data {
                b.extend_from_slice(&s);
            }
        }
        Ok(n)
    }

    fn export_state(&self) -> Result<Option<TransferState>> {
        Ok(None)
    }

    fn import_state(&self, _st: TransferState) -> Result<()> {
        Ok(())
    }
}
