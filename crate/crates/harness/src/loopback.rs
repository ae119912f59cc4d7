//! Lock-free in-memory byte transport between two endpoints, for
//! benchmarks where the simulated network's shared state would dominate.

use std::sync::Arc;

use async_trait::async_trait;
use chunnel::{
    Accepts, Chunnel, Conn, DataType, Datapath, Endpoint, Error, Lower, Msg, Produces, Result,
    WrapContext,
};
use crossbeam_queue::SegQueue;
use tokio::sync::Notify;

const MAX_DATAGRAM: usize = 65_507;
/// Senders yield while the peer has this many messages queued.
const HIGH_WATER: usize = 4096;

struct Port {
    ep: Endpoint,
    queue: SegQueue<(Endpoint, Vec<u8>)>,
    ready: Notify,
}

/// One end of a loopback pair; a bootstrap chunnel.
pub struct Loopback {
    me: Arc<Port>,
    peer: Arc<Port>,
}

impl Loopback {
    pub fn pair(a: Endpoint, b: Endpoint) -> (Arc<Loopback>, Arc<Loopback>) {
        let port = |ep| {
            Arc::new(Port {
                ep,
                queue: SegQueue::new(),
                ready: Notify::new(),
            })
        };
        let (pa, pb) = (port(a), port(b));
        (
            Arc::new(Loopback {
                me: pa.clone(),
                peer: pb.clone(),
            }),
            Arc::new(Loopback { me: pb, peer: pa }),
        )
    }

    pub fn local(&self) -> Endpoint {
        self.me.ep
    }
}

#[async_trait]
impl Chunnel for Loopback {
    fn name(&self) -> &str {
        "loopback"
    }

    fn accepts(&self) -> Accepts {
        Accepts::Unit
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Bytes)
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        match lower {
            Lower::Unit => Ok(Arc::new(LoopbackConn {
                me: self.me.clone(),
                peer: self.peer.clone(),
            })),
            Lower::Conn(_) => Err(Error::layer("loopback", "must be the bottom layer")),
        }
    }
}

pub struct LoopbackConn {
    me: Arc<Port>,
    peer: Arc<Port>,
}

#[async_trait]
impl Datapath for LoopbackConn {
    fn data_type(&self) -> DataType {
        DataType::Bytes
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        while self.peer.queue.len() >= HIGH_WATER {
            tokio::task::yield_now().await;
        }
        for m in batch {
            let (dst, b) = m.into_bytes("loopback")?;
            if dst != self.peer.ep {
                return Err(Error::layer("loopback", format!("no route to {dst}")));
            }
            if b.len() > MAX_DATAGRAM {
                return Err(Error::PayloadTooLarge(b.len()));
            }
            self.peer.queue.push((self.me.ep, b));
        }
        self.peer.ready.notify_one();
        Ok(())
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        loop {
            let ready = self.me.ready.notified();
            let mut n = 0;
            while n < slots.len() {
                match self.me.queue.pop() {
                    Some((src, b)) => {
                        slots[n] = Some(Msg::bytes(src, b));
                        n += 1;
                    }
                    None => break,
                }
            }
            if n > 0 {
                return Ok(n);
            }
            ready.await;
        }
    }
}
