//! Key-based sharding of records.
//!
//! A client-side shard layer sends each record straight to its shard. A
//! server-side one sends everything to the canonical endpoint, whose shard
//! layer forwards each record to its shard. Both use
//! `shard = FNV-1a-64(key) mod N`.

use std::sync::Arc;

use async_trait::async_trait;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, Data, DataType, Datapath, Endpoint, Msg};
use crate::error::{Error, Result};
use crate::negotiate::Capability;

pub const CLIENT_SHARD: &str = "client-shard";
pub const SERVER_SHARD: &str = "server-shard";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    pub canonical: Endpoint,
    pub shards: Vec<Endpoint>,
}

impl ShardMap {
    pub fn new(canonical: Endpoint, shards: Vec<Endpoint>) -> Self {
        assert!(!shards.is_empty(), "a shard map needs at least one shard");
        ShardMap { canonical, shards }
    }

    pub fn index(&self, key: &str) -> usize {
        (fnv1a64(key.as_bytes()) % self.shards.len() as u64) as usize
    }

    pub fn shard_for(&self, key: &str) -> Endpoint {
        self.shards[self.index(key)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardMode {
    ClientSide,
    ServerSide,
}

impl ShardMode {
    pub fn label(self) -> &'static str {
        match self {
            ShardMode::ClientSide => CLIENT_SHARD,
            ShardMode::ServerSide => SERVER_SHARD,
        }
    }
}

/// Which endpoint the layer runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardRole {
    Client,
    /// Receives server-side traffic and forwards it to shards.
    Canonical,
    /// A shard; records pass through.
    Backend,
}

pub struct Shard {
    mode: ShardMode,
    role: ShardRole,
    map: Arc<ShardMap>,
}

impl Shard {
    pub fn new(mode: ShardMode, role: ShardRole, map: ShardMap) -> Arc<Self> {
        Arc::new(Shard {
            mode,
            role,
            map: Arc::new(map),
        })
    }

    pub fn mode(&self) -> ShardMode {
        self.mode
    }
}

#[async_trait]
impl Chunnel for Shard {
    fn name(&self) -> &str {
        self.mode.label()
    }

    fn accepts(&self) -> Accepts {
        Accepts::Exactly(DataType::Record)
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Record)
    }

    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::compositional("shard", [self.mode.label()])]
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        let Lower::Conn(inner) = lower else {
            return Err(Error::NoBootstrapLayer);
        };
        Ok(Arc::new(ShardConn {
            inner,
            mode: self.mode,
            role: self.role,
            map: self.map.clone(),
        }))
    }
}

pub struct ShardConn {
    inner: Conn,
    mode: ShardMode,
    role: ShardRole,
    map: Arc<ShardMap>,
}

fn key_of(m: &Msg) -> Result<&str> {
    match &m.data {
        Data::Record(r) if r.key.is_empty() => Err(Error::EmptyKey),
        Data::Record(r) => Ok(&r.key),
        other => Err(Error::layer(
            "shard",
            format!("expected a record, got {:?}", other.data_type()),
        )),
    }
}

#[async_trait]
impl Datapath for ShardConn {
    fn data_type(&self) -> DataType {
        DataType::Record
    }

    async fn send(&self, mut batch: Vec<Msg>) -> Result<()> {
        if self.role == ShardRole::Client {
            for m in &mut batch {
                let to = match self.mode {
                    ShardMode::ClientSide => self.map.shard_for(key_of(m)?),
                    ShardMode::ServerSide => {
                        key_of(m)?;
                        self.map.canonical
                    }
                };
                m.addr = to;
            }
        }
        self.inner.send(batch).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let forwarding = self.role == ShardRole::Canonical && self.mode == ShardMode::ServerSide;
        loop {
            let n = self.inner.recv(slots).await?;
            if !forwarding {
                return Ok(n);
            }
            // everything reaching the canonical endpoint belongs to a shard
            let mut fwd = Vec::new();
            for slot in slots.iter_mut().take(n) {
                let Some(m) = slot.take() else { continue };
                match key_of(&m) {
                    Ok(k) => {
                        let to = self.map.shard_for(k);
                        fwd.push(Msg {
                            addr: to,
                            data: m.data,
                        });
                    }
                    Err(e) => tracing::debug!(from = %m.addr, "not forwarding: {e}"),
                }
            }
            if !fwd.is_empty() {
                self.inner.send(fwd).await?;
            }
        }
    }
}
