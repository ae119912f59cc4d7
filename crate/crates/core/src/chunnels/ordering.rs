//! Per-group ordering of records.
//!
//! Receive-side mode buffers records at the receiver and releases each group
//! in sequence order. It only works with a single receiver. Provider mode
//! leaves ordering to the topic's ordered path.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, Data, DataType, Datapath, Endpoint, Msg};
use crate::error::{Error, Result};
use crate::negotiate::Capability;
use crate::pubsub::{OrderedPath, Topic};

pub const RECV_SIDE: &str = "recv-side";
pub const PROVIDER: &str = "provider";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderMode {
    RecvSide,
    Provider,
}

impl OrderMode {
    pub fn label(self) -> &'static str {
        match self {
            OrderMode::RecvSide => RECV_SIDE,
            OrderMode::Provider => PROVIDER,
        }
    }
}

pub struct Ordering {
    mode: OrderMode,
    topic: Option<(Arc<Topic>, Endpoint)>,
}

impl Ordering {
    /// Receive-side ordering over any record connection.
    pub fn recv_side() -> Arc<Self> {
        Arc::new(Ordering {
            mode: OrderMode::RecvSide,
            topic: None,
        })
    }

    /// Receive-side ordering for a topic receiver. Building it joins the
    /// topic's best-effort consumer group; releases are reported to the topic
    /// and a second receiver in the group is an error.
    pub fn recv_side_on(topic: Arc<Topic>, member: Endpoint) -> Arc<Self> {
        Arc::new(Ordering {
            mode: OrderMode::RecvSide,
            topic: Some((topic, member)),
        })
    }

    pub fn provider(topic: Arc<Topic>, member: Endpoint) -> Arc<Self> {
        Arc::new(Ordering {
            mode: OrderMode::Provider,
            topic: Some((topic, member)),
        })
    }

    pub fn mode(&self) -> OrderMode {
        self.mode
    }
}

#[async_trait]
impl Chunnel for Ordering {
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
        vec![Capability::compositional("order", [self.mode.label()])]
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        let Lower::Conn(inner) = lower else {
            return Err(Error::NoBootstrapLayer);
        };
        match self.mode {
            OrderMode::RecvSide => {
                if let Some((t, member)) = &self.topic {
                    t.join_unordered(*member);
                }
                Ok(Arc::new(RecvSideConn {
                    inner,
                    topic: self.topic.as_ref().map(|(t, _)| t.clone()),
                    state: Mutex::new(Reorder::default()),
                }))
            }
            OrderMode::Provider => {
                let (topic, member) = self
                    .topic
                    .clone()
                    .ok_or_else(|| Error::layer(PROVIDER, "provider ordering needs a topic"))?;
                Ok(Arc::new(ProviderConn {
                    path: OrderedPath::new(topic, member),
                }))
            }
        }
    }
}

/// Per-group reorder buffer.
#[derive(Default)]
pub struct Reorder {
    next: BTreeMap<u32, u64>,
    held: BTreeMap<u32, BTreeMap<u64, Msg>>,
    ready: VecDeque<Msg>,
}

impl Reorder {
    /// Take one arrival; records of a group come out in sequence order
    /// starting at 0. Untagged messages pass straight through and repeats
    /// of released sequence numbers are dropped.
    pub fn push(&mut self, m: Msg) {
        let tag = match &m.data {
            Data::Record(r) => r.order,
            Data::Bytes(_) => None,
        };
        let Some(tag) = tag else {
            self.ready.push_back(m);
            return;
        };
        let next = self.next.entry(tag.group).or_insert(0);
        if tag.seq < *next {
            return;
        }
        let held = self.held.entry(tag.group).or_default();
        held.insert(tag.seq, m);
        while let Some(m) = held.remove(next) {
            self.ready.push_back(m);
            *next += 1;
        }
    }

    pub fn pop(&mut self) -> Option<Msg> {
        self.ready.pop_front()
    }

    /// Records waiting for an earlier sequence number.
    pub fn held(&self) -> usize {
        self.held.values().map(BTreeMap::len).sum()
    }
}

pub struct RecvSideConn {
    inner: Conn,
    topic: Option<Arc<Topic>>,
    state: Mutex<Reorder>,
}

impl RecvSideConn {
    fn drain(&self, slots: &mut [Option<Msg>]) -> usize {
        let mut st = self.state.lock();
        let mut n = 0;
        while n < slots.len() {
            let Some(m) = st.pop() else { break };
            if let (Some(t), Data::Record(r)) = (&self.topic, &m.data) {
                if let Some(tag) = r.order {
                    t.release(tag.group, tag.seq);
                }
            }
            slots[n] = Some(m);
            n += 1;
        }
        n
    }
}

#[async_trait]
impl Datapath for RecvSideConn {
    fn data_type(&self) -> DataType {
        DataType::Record
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        self.inner.send(batch).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let mut buf: Vec<Option<Msg>> = (0..slots.len().max(1)).map(|_| None).collect();
        loop {
            let n = self.drain(slots);
            if n > 0 {
                return Ok(n);
            }
            let k = self.inner.recv(&mut buf).await?;
            if let Some(t) = &self.topic {
                let receivers = t.unordered_receivers();
                if receivers > 1 {
                    return Err(Error::OrderingViolation(format!(
                        "receive-side ordering needs a single receiver, topic has {receivers}"
                    )));
                }
            }
            let mut st = self.state.lock();
            for m in buf[..k].iter_mut().filter_map(Option::take) {
                st.push(m);
            }
        }
    }
}

pub struct ProviderConn {
    path: OrderedPath,
}

#[async_trait]
impl Datapath for ProviderConn {
    fn data_type(&self) -> DataType {
        DataType::Record
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        for m in batch {
            let (_, r) = m.into_record(PROVIDER)?;
            self.path.publish(r)?;
        }
        Ok(())
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        self.path.recv(slots).await
    }
}
