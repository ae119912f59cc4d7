use std::hint::black_box;
use std::sync::Arc;

use async_trait::async_trait;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, Data, DataType, Datapath, Msg};
use crate::error::{Error, Result};

/// Identity layer. Every payload passes through `black_box` so the
/// optimizer must assume it is read.
pub struct Noop;

impl Noop {
    pub fn new() -> Arc<Self> {
        Arc::new(Noop)
    }
}

#[async_trait]
impl Chunnel for Noop {
    fn name(&self) -> &str {
        "noop"
    }

    fn accepts(&self) -> Accepts {
        Accepts::Any
    }

    fn produces(&self) -> Produces {
        Produces::SameAsInput
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        match lower {
            Lower::Conn(inner) => Ok(Arc::new(NoopConn { inner })),
            Lower::Unit => Err(Error::NoBootstrapLayer),
        }
    }
}

pub struct NoopConn {
    inner: Conn,
}

fn touch(m: &Msg) {
    match &m.data {
        Data::Bytes(b) => {
            black_box(b.as_slice());
        }
        Data::Record(r) => {
            black_box(r);
        }
    }
}

#[async_trait]
impl Datapath for NoopConn {
    fn data_type(&self) -> DataType {
        self.inner.data_type()
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        batch.iter().for_each(touch);
        self.inner.send(batch).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let n = self.inner.recv(slots).await?;
        slots[..n].iter().flatten().for_each(touch);
        Ok(n)
    }

    fn export_state(&self) -> Result<Option<crate::datapath::TransferState>> {
        Ok(None)
    }

    fn import_state(&self, _st: crate::datapath::TransferState) -> Result<()> {
        Ok(())
    }
}
