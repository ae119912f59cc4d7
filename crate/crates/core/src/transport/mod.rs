//! Best-effort datagram base connections.

mod simnet;
mod udp;

use std::sync::{Arc, OnceLock};

use async_trait::async_trait;

pub use simnet::{Delivery, NetStats, SendHook, SimNet, SimNetConfig, SimSocket};
pub use udp::UdpSocketBase;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, DataType, Datapath, Endpoint, Msg, TransferState};
use crate::error::{Error, Result};

/// Largest datagram payload either transport accepts.
pub const MAX_DATAGRAM: usize = 64 * 1024;

/// An unreliable datagram socket. `recv_from` and `recv_batch` are cancel-safe.
#[async_trait]
pub trait BaseSocket: Send + Sync + 'static {
    fn local(&self) -> Endpoint;

    fn locals(&self) -> Vec<Endpoint> {
        vec![self.local()]
    }

    async fn send_to(&self, peer: Endpoint, payload: &[u8]) -> Result<()>;

    /// Send from a specific bound address (sockets bound to several).
    async fn send_from(&self, local: Endpoint, peer: Endpoint, payload: &[u8]) -> Result<()> {
        if local != self.local() {
            return Err(Error::layer("socket", format!("{local} not bound here")));
        }
        self.send_to(peer, payload).await
    }

    async fn recv_from(&self) -> Result<(Endpoint, Vec<u8>)>;

    /// Wait for at least one datagram, then take up to `limit` without blocking.
    async fn recv_batch(&self, out: &mut Vec<(Endpoint, Vec<u8>)>, limit: usize) -> Result<usize> {
        let _ = limit;
        out.push(self.recv_from().await?);
        Ok(1)
    }
}

pub type Socket = Arc<dyn BaseSocket>;

/// State record exported by transport datapaths: the bound socket, which
/// carries its ports and any datagrams already queued for them.
pub const SOCKET_STATE: &str = "transport.socket";

/// Byte datapath directly over a socket. A datapath built without a socket
/// gets one by importing [`SOCKET_STATE`].
pub struct SocketDatapath {
    sock: OnceLock<Socket>,
}

impl SocketDatapath {
    pub fn new(sock: Socket) -> Self {
        let s = OnceLock::new();
        let _ = s.set(sock);
        SocketDatapath { sock: s }
    }

    pub fn unbound() -> Self {
        SocketDatapath {
            sock: OnceLock::new(),
        }
    }

    pub fn socket(&self) -> Result<&Socket> {
        self.sock.get().ok_or(Error::ConnectionClosed)
    }

    pub fn locals(&self) -> Vec<Endpoint> {
        self.sock.get().map(|s| s.locals()).unwrap_or_default()
    }
}

#[async_trait]
impl Datapath for SocketDatapath {
    fn data_type(&self) -> DataType {
        DataType::Bytes
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        let sock = self.socket()?;
        for m in batch {
            let (addr, b) = m.into_bytes("transport")?;
            sock.send_to(addr, &b).await?;
        }
        Ok(())
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let sock = self.socket()?;
        let mut buf = Vec::with_capacity(slots.len());
        let n = sock.recv_batch(&mut buf, slots.len()).await?;
        for (slot, (from, b)) in slots.iter_mut().zip(buf) {
            *slot = Some(Msg::bytes(from, b));
        }
        Ok(n)
    }

    fn export_state(&self) -> Result<Option<TransferState>> {
        Ok(self.sock.get().map(|s| TransferState {
            kind: SOCKET_STATE,
            state: Box::new(s.clone()),
        }))
    }

    fn import_state(&self, st: TransferState) -> Result<()> {
        if st.kind != SOCKET_STATE {
            return Err(Error::layer(
                "transport",
                format!("cannot import {:?}", st.kind),
            ));
        }
        let sock = st
            .state
            .downcast::<Socket>()
            .map_err(|_| Error::layer("transport", "bad socket state"))?;
        self.sock
            .set(*sock)
            .map_err(|_| Error::layer("transport", "already bound"))
    }
}

/// Bootstrap chunnel over a [`SimNet`]. Binds its addresses from unit; an
/// empty address list yields an unbound datapath that expects imported state.
/// Given an existing byte connection (a negotiated base), adopts it.
pub struct SimTransport {
    name: String,
    net: SimNet,
    binds: Vec<Endpoint>,
}

impl SimTransport {
    pub fn new(net: SimNet, binds: Vec<Endpoint>) -> Arc<Self> {
        Self::named("sim-transport", net, binds)
    }

    pub fn named(name: impl Into<String>, net: SimNet, binds: Vec<Endpoint>) -> Arc<Self> {
        Arc::new(SimTransport {
            name: name.into(),
            net,
            binds,
        })
    }
}

#[async_trait]
impl Chunnel for SimTransport {
    fn name(&self) -> &str {
        &self.name
    }

    fn accepts(&self) -> Accepts {
        Accepts::Unit
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Bytes)
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        adopt_or(lower, || {
            if self.binds.is_empty() {
                return Ok(Arc::new(SocketDatapath::unbound()) as Conn);
            }
            let s = self.net.bind_many(&self.binds)?;
            Ok(Arc::new(SocketDatapath::new(Arc::new(s))) as Conn)
        })
    }
}

/// Bootstrap chunnel over an OS UDP socket.
pub struct UdpTransport {
    addr: std::net::SocketAddr,
}

impl UdpTransport {
    pub fn new(addr: std::net::SocketAddr) -> Arc<Self> {
        Arc::new(UdpTransport { addr })
    }
}

#[async_trait]
impl Chunnel for UdpTransport {
    fn name(&self) -> &str {
        "udp"
    }

    fn accepts(&self) -> Accepts {
        Accepts::Unit
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Bytes)
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        match lower {
            Lower::Unit => {
                let s = UdpSocketBase::bind(self.addr).await?;
                Ok(Arc::new(SocketDatapath::new(Arc::new(s))))
            }
            other => adopt_or(other, || unreachable!()),
        }
    }
}

fn adopt_or(lower: Lower, bind: impl FnOnce() -> Result<Conn>) -> Result<Conn> {
    match lower {
        Lower::Unit => bind(),
        Lower::Conn(c) if c.data_type() == DataType::Bytes => Ok(c),
        Lower::Conn(c) => Err(Error::layer(
            "transport",
            format!("cannot adopt a {:?} connection", c.data_type()),
        )),
    }
}
