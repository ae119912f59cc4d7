//! The datapath side of a chunnel: message types and the connection trait.

use std::any::Any;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::sync::Arc;

use async_trait::async_trait;

use crate::error::{Error, Result};

/// A network address: host plus 16-bit port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint(pub SocketAddr);

impl Endpoint {
    /// Simulated-network address `10.<host>:port`.
    pub fn sim(host: u16, port: u16) -> Self {
        let [hi, lo] = host.to_be_bytes();
        Endpoint(SocketAddr::V4(SocketAddrV4::new(
            Ipv4Addr::new(10, 0, hi, lo),
            port,
        )))
    }

    pub fn port(&self) -> u16 {
        self.0.port()
    }

    pub fn with_port(&self, port: u16) -> Self {
        let mut a = self.0;
        a.set_port(port);
        Endpoint(a)
    }

    /// Placeholder address for messages whose destination is implied by the connection.
    pub const fn unspecified() -> Self {
        Endpoint(SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0)))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<SocketAddr> for Endpoint {
    fn from(a: SocketAddr) -> Self {
        Endpoint(a)
    }
}

/// Keyed application record carried by serialization, sharding and ordering layers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Record {
    pub key: String,
    pub value: Vec<u8>,
    pub order: Option<OrderTag>,
}

/// Ordering group and position within that group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrderTag {
    pub group: u32,
    pub seq: u64,
}

impl Record {
    pub fn new(key: impl Into<String>, value: impl Into<Vec<u8>>) -> Self {
        Record {
            key: key.into(),
            value: value.into(),
            order: None,
        }
    }

    pub fn ordered(mut self, group: u32, seq: u64) -> Self {
        self.order = Some(OrderTag { group, seq });
        self
    }
}

/// The payload kinds a layer can accept or yield.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    /// No connection yet; only bootstrap (transport) layers accept this.
    Unit,
    Bytes,
    Record,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Data {
    Bytes(Vec<u8>),
    Record(Record),
}

impl Data {
    pub fn data_type(&self) -> DataType {
        match self {
            Data::Bytes(_) => DataType::Bytes,
            Data::Record(_) => DataType::Record,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Data::Bytes(b) => b.len(),
            Data::Record(r) => r.key.len() + r.value.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One message: a payload and the remote address it is going to or came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msg {
    pub addr: Endpoint,
    pub data: Data,
}

impl Msg {
    pub fn bytes(addr: Endpoint, b: impl Into<Vec<u8>>) -> Self {
        Msg {
            addr,
            data: Data::Bytes(b.into()),
        }
    }

    pub fn record(addr: Endpoint, r: Record) -> Self {
        Msg {
            addr,
            data: Data::Record(r),
        }
    }

    pub fn into_bytes(self, layer: &str) -> Result<(Endpoint, Vec<u8>)> {
        match self.data {
            Data::Bytes(b) => Ok((self.addr, b)),
            Data::Record(_) => Err(Error::layer(layer, "expected bytes, got record")),
        }
    }

    pub fn into_record(self, layer: &str) -> Result<(Endpoint, Record)> {
        match self.data {
            Data::Record(r) => Ok((self.addr, r)),
            Data::Bytes(_) => Err(Error::layer(layer, "expected record, got bytes")),
        }
    }
}

/// State handed from a datapath to its replacement during reconfiguration.
pub struct TransferState {
    /// Names the state contract; the importer must understand it.
    pub kind: &'static str,
    pub state: Box<dyn Any + Send>,
}

impl fmt::Debug for TransferState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransferState")
            .field("kind", &self.kind)
            .finish()
    }
}

/// A live connection layer.
///
/// `send` takes a batch and never reorders it. `recv` waits for at least one
/// message, fills `slots` from the front and returns how many were filled.
/// Implementations must be cancel-safe in `recv`: a dropped `recv` future may
/// not lose messages it already took from the layer below.
#[async_trait]
pub trait Datapath: Send + Sync + 'static {
    fn data_type(&self) -> DataType;

    async fn send(&self, batch: Vec<Msg>) -> Result<()>;

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize>;

    /// Export session state for a replacement implementation. `None` means
    /// the datapath carries no state that must survive a swap.
    fn export_state(&self) -> Result<Option<TransferState>> {
        Ok(None)
    }

    fn import_state(&self, state: TransferState) -> Result<()> {
        Err(Error::layer(
            "datapath",
            format!("no transfer path for state {:?}", state.kind),
        ))
    }
}

pub type Conn = Arc<dyn Datapath>;

/// Receive a single message; convenience over the slot interface.
pub async fn recv_one(conn: &dyn Datapath) -> Result<Msg> {
    let mut slot = [None];
    loop {
        if conn.recv(&mut slot).await? > 0 {
            if let Some(m) = slot[0].take() {
                return Ok(m);
            }
        }
    }
}
