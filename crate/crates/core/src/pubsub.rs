//! In-process publish/subscribe topic with two delivery paths.
//!
//! The best-effort path hands each published message to one receiver of the
//! consumer group after a random delay, so messages overtake each other. The
//! ordered path delivers each group's records one at a time, in sequence,
//! after all earlier records of the group were released by either path.
//! Members agree on which path to use through a rendezvous entry and move
//! between them by two-phase commit carried over the topic.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::{mpsc, Notify};
use tokio::task::AbortHandle;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, DataType, Datapath, Endpoint, Msg, Record};
use crate::error::{Error, Result};
use crate::negotiate::Capability;
use crate::reconfig::twopc::{Bus, Hooks, TwoPcConfig, TwoPcMsg, TwoPcNode};
use crate::rendezvous::{vote_on_transition, JoinOutcome, Joined, Rendezvous};
use crate::stack::StackSpec;

#[derive(Debug, Clone, Copy)]
pub struct TopicConfig {
    /// Minimum best-effort delay.
    pub base_delay: Duration,
    /// Uniform extra best-effort delay in `[0, jitter)`.
    pub jitter: Duration,
    /// Delay of each ordered delivery once it is eligible.
    pub ordered_hop: Duration,
    /// Delay of 2PC messages between members.
    pub control_delay: Duration,
    pub seed: u64,
}

impl Default for TopicConfig {
    fn default() -> Self {
        TopicConfig {
            base_delay: Duration::from_millis(1),
            jitter: Duration::from_millis(60),
            ordered_hop: Duration::from_millis(10),
            control_delay: Duration::from_millis(1),
            seed: 0,
        }
    }
}

type Queue<T> = Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<T>>>;

struct Mailbox<T> {
    tx: mpsc::UnboundedSender<T>,
    rx: Queue<T>,
}

impl<T> Mailbox<T> {
    fn new() -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        Mailbox {
            tx,
            rx: Arc::new(tokio::sync::Mutex::new(rx)),
        }
    }
}

#[derive(Default)]
struct GroupQueue {
    queue: VecDeque<(Endpoint, Record)>,
    running: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TopicStats {
    pub best_effort: u64,
    pub ordered: u64,
    /// Best-effort messages published while no receiver was registered.
    pub dropped: u64,
}

struct State {
    rng: ChaCha8Rng,
    unordered: BTreeMap<Endpoint, Mailbox<(Endpoint, Vec<u8>)>>,
    unordered_receivers: Vec<Endpoint>,
    next_receiver: usize,
    ordered: BTreeMap<Endpoint, Mailbox<(Endpoint, Record)>>,
    ordered_receivers: Vec<Endpoint>,
    groups: BTreeMap<u32, GroupQueue>,
    released: BTreeMap<u32, u64>,
    control: BTreeMap<Endpoint, mpsc::UnboundedSender<(Endpoint, TwoPcMsg)>>,
    stats: TopicStats,
    tasks: Vec<AbortHandle>,
}

pub struct Topic {
    cfg: TopicConfig,
    state: Mutex<State>,
    changed: Notify,
}

impl Drop for Topic {
    fn drop(&mut self) {
        for t in self.state.get_mut().tasks.drain(..) {
            t.abort();
        }
    }
}

impl Topic {
    pub fn new(cfg: TopicConfig) -> Arc<Self> {
        Arc::new(Topic {
            cfg,
            state: Mutex::new(State {
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                unordered: BTreeMap::new(),
                unordered_receivers: Vec::new(),
                next_receiver: 0,
                ordered: BTreeMap::new(),
                ordered_receivers: Vec::new(),
                groups: BTreeMap::new(),
                released: BTreeMap::new(),
                control: BTreeMap::new(),
                stats: TopicStats::default(),
                tasks: Vec::new(),
            }),
            changed: Notify::new(),
        })
    }

    pub fn config(&self) -> &TopicConfig {
        &self.cfg
    }

    pub fn stats(&self) -> TopicStats {
        self.state.lock().stats
    }

    fn unordered_queue(&self, member: Endpoint) -> Queue<(Endpoint, Vec<u8>)> {
        let mut st = self.state.lock();
        st.unordered
            .entry(member)
            .or_insert_with(Mailbox::new)
            .rx
            .clone()
    }

    /// Join the best-effort consumer group.
    pub(crate) fn join_unordered(&self, member: Endpoint) {
        let mut st = self.state.lock();
        st.unordered.entry(member).or_insert_with(Mailbox::new);
        if !st.unordered_receivers.contains(&member) {
            st.unordered_receivers.push(member);
        }
    }

    pub fn unordered_receivers(&self) -> usize {
        self.state.lock().unordered_receivers.len()
    }

    pub fn ordered_receivers(&self) -> usize {
        self.state.lock().ordered_receivers.len()
    }

    fn publish_unordered(self: &Arc<Self>, from: Endpoint, payload: Vec<u8>) {
        let mut st = self.state.lock();
        if st.unordered_receivers.is_empty() {
            st.stats.dropped += 1;
            return;
        }
        let i = st.next_receiver % st.unordered_receivers.len();
        st.next_receiver = st.next_receiver.wrapping_add(1);
        let to = st.unordered_receivers[i];
        let tx = st.unordered[&to].tx.clone();
        let jitter = if self.cfg.jitter.is_zero() {
            Duration::ZERO
        } else {
            st.rng.gen_range(Duration::ZERO..self.cfg.jitter)
        };
        let delay = self.cfg.base_delay + jitter;
        st.stats.best_effort += 1;
        let t = tokio::spawn(async move {
            tokio::time::sleep(delay).await;
            let _ = tx.send((from, payload));
        });
        st.tasks.retain(|h| !h.is_finished());
        st.tasks.push(t.abort_handle());
    }

    fn ordered_queue(&self, member: Endpoint) -> Queue<(Endpoint, Record)> {
        let mut st = self.state.lock();
        let q = st
            .ordered
            .entry(member)
            .or_insert_with(Mailbox::new)
            .rx
            .clone();
        if !st.ordered_receivers.contains(&member) {
            st.ordered_receivers.push(member);
            st.ordered_receivers.sort();
        }
        drop(st);
        self.changed.notify_waiters();
        q
    }

    fn publish_ordered(self: &Arc<Self>, from: Endpoint, rec: Record) -> Result<()> {
        let Some(tag) = rec.order else {
            return Err(Error::OrderingViolation(
                "ordered publish needs a group and sequence".into(),
            ));
        };
        let mut st = self.state.lock();
        st.stats.ordered += 1;
        let g = st.groups.entry(tag.group).or_default();
        g.queue.push_back((from, rec));
        if !g.running {
            g.running = true;
            let me = self.clone();
            let t = tokio::spawn(async move { me.drain_group(tag.group).await });
            st.tasks.retain(|h| !h.is_finished());
            st.tasks.push(t.abort_handle());
        }
        Ok(())
    }

    async fn drain_group(self: Arc<Self>, group: u32) {
        loop {
            let (from, rec) = {
                let mut st = self.state.lock();
                let g = st
                    .groups
                    .get_mut(&group)
                    .expect("group exists while draining");
                match g.queue.pop_front() {
                    Some(x) => x,
                    None => {
                        g.running = false;
                        return;
                    }
                }
            };
            let seq = rec.order.map(|t| t.seq).unwrap_or(0);
            // wait until every earlier record of the group is out, then for a receiver
            let tx = loop {
                let changed = self.changed.notified();
                tokio::pin!(changed);
                changed.as_mut().enable();
                {
                    let st = self.state.lock();
                    let released = st.released.get(&group).copied().unwrap_or(0);
                    if released >= seq && !st.ordered_receivers.is_empty() {
                        let to = st.ordered_receivers[group as usize % st.ordered_receivers.len()];
                        break st.ordered[&to].tx.clone();
                    }
                }
                changed.await;
            };
            tokio::time::sleep(self.cfg.ordered_hop).await;
            let _ = tx.send((from, rec));
            self.release(group, seq);
        }
    }

    /// Record that `seq` of `group` reached the application.
    pub fn release(&self, group: u32, seq: u64) {
        {
            let mut st = self.state.lock();
            let w = st.released.entry(group).or_insert(0);
            *w = (*w).max(seq + 1);
        }
        self.changed.notify_waiters();
    }

    /// Next sequence number the topic expects to release for `group`.
    pub fn released(&self, group: u32) -> u64 {
        self.state.lock().released.get(&group).copied().unwrap_or(0)
    }

    /// Control mailbox of `member` for 2PC traffic.
    pub fn control(&self, member: Endpoint) -> mpsc::UnboundedReceiver<(Endpoint, TwoPcMsg)> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.state.lock().control.insert(member, tx);
        rx
    }

    /// Every member with a control mailbox.
    pub fn members(&self) -> Vec<Endpoint> {
        self.state.lock().control.keys().copied().collect()
    }
}

/// Bootstrap chunnel onto the topic's best-effort path as `member`.
pub struct TopicTransport {
    topic: Arc<Topic>,
    member: Endpoint,
}

impl TopicTransport {
    pub fn new(topic: Arc<Topic>, member: Endpoint) -> Arc<Self> {
        Arc::new(TopicTransport { topic, member })
    }
}

#[async_trait]
impl Chunnel for TopicTransport {
    fn name(&self) -> &str {
        "topic"
    }

    fn accepts(&self) -> Accepts {
        Accepts::Unit
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Bytes)
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        if let Lower::Conn(_) = lower {
            return Err(Error::layer("topic", "must be the bottom layer"));
        }
        Ok(Arc::new(TopicConn {
            queue: self.topic.unordered_queue(self.member),
            topic: self.topic.clone(),
            member: self.member,
        }))
    }
}

struct TopicConn {
    topic: Arc<Topic>,
    member: Endpoint,
    queue: Queue<(Endpoint, Vec<u8>)>,
}

#[async_trait]
impl Datapath for TopicConn {
    fn data_type(&self) -> DataType {
        DataType::Bytes
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        for m in batch {
            let (_, b) = m.into_bytes("topic")?;
            self.topic.publish_unordered(self.member, b);
        }
        Ok(())
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let mut q = self.queue.lock().await;
        let mut buf = Vec::with_capacity(slots.len());
        let n = q.recv_many(&mut buf, slots.len()).await;
        if n == 0 {
            return Err(Error::ConnectionClosed);
        }
        for (slot, (from, b)) in slots.iter_mut().zip(buf) {
            *slot = Some(Msg::bytes(from, b));
        }
        Ok(n)
    }
}

/// Datapath onto the topic's ordered path, used by provider-ordered layers.
pub(crate) struct OrderedPath {
    topic: Arc<Topic>,
    member: Endpoint,
    queue: tokio::sync::OnceCell<Queue<(Endpoint, Record)>>,
}

impl OrderedPath {
    pub(crate) fn new(topic: Arc<Topic>, member: Endpoint) -> Self {
        OrderedPath {
            topic,
            member,
            queue: tokio::sync::OnceCell::new(),
        }
    }

    pub(crate) fn publish(&self, rec: Record) -> Result<()> {
        self.topic.publish_ordered(self.member, rec)
    }

    pub(crate) async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let q = self
            .queue
            .get_or_init(|| async { self.topic.ordered_queue(self.member) })
            .await;
        let mut q = q.lock().await;
        let mut buf = Vec::with_capacity(slots.len());
        let n = q.recv_many(&mut buf, slots.len()).await;
        if n == 0 {
            return Err(Error::ConnectionClosed);
        }
        for (slot, (from, r)) in slots.iter_mut().zip(buf) {
            *slot = Some(Msg::record(from, r));
        }
        Ok(n)
    }
}

/// Carries 2PC messages between topic members.
pub struct TopicBus {
    topic: Arc<Topic>,
    me: Endpoint,
}

impl TopicBus {
    pub fn new(topic: Arc<Topic>, me: Endpoint) -> Arc<Self> {
        Arc::new(TopicBus { topic, me })
    }
}

#[async_trait]
impl Bus for TopicBus {
    async fn send(&self, to: Endpoint, msg: TwoPcMsg) -> Result<()> {
        let tx = self
            .topic
            .state
            .lock()
            .control
            .get(&to)
            .cloned()
            .ok_or(Error::PeerUnreachable)?;
        tokio::time::sleep(self.topic.cfg.control_delay).await;
        tx.send((self.me, msg)).map_err(|_| Error::PeerUnreachable)
    }
}

struct Epoch {
    conn: Conn,
    pump: Option<AbortHandle>,
}

impl Drop for Epoch {
    fn drop(&mut self) {
        if let Some(p) = &self.pump {
            p.abort();
        }
    }
}

struct MemberState {
    joined: Option<Joined>,
    epochs: BTreeMap<u64, Epoch>,
}

/// A participant of a topic connection named by a rendezvous address.
///
/// Receivers merge messages from the current epoch and the one before it, so
/// records still in flight under the old stack are not lost.
pub struct Member {
    id: Endpoint,
    addr: String,
    spec: StackSpec,
    topic: Arc<Topic>,
    rv: Rendezvous,
    receives: bool,
    state: Mutex<MemberState>,
    out_tx: mpsc::UnboundedSender<(u64, Result<Msg>)>,
    out_rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<(u64, Result<Msg>)>>,
    node: std::sync::OnceLock<Arc<TwoPcNode<Joined>>>,
    serve: Mutex<Option<AbortHandle>>,
}

impl Drop for Member {
    fn drop(&mut self) {
        if let Some(t) = self.serve.get_mut().take() {
            t.abort();
        }
    }
}

struct MemberHooks {
    member: std::sync::Weak<Member>,
}

#[async_trait]
impl Hooks<Joined> for MemberHooks {
    fn check(&self, _from: Endpoint, target: &[u8]) -> Option<(Vec<u8>, Joined)> {
        let m = self.member.upgrade()?;
        let cur = m.state.lock().joined.clone()?;
        vote_on_transition(&cur, &m.spec, target).map(|j| (Vec::new(), j))
    }

    async fn commit(&self, _pid: u64, j: Joined) {
        if let Some(m) = self.member.upgrade() {
            if let Err(e) = m.install(j).await {
                tracing::error!(member = %m.id, "committed stack failed to build: {e}");
            }
        }
    }
}

impl Member {
    /// `receives` members pump incoming records; publishers never read, so
    /// they never join a receiving group.
    pub fn new(
        topic: Arc<Topic>,
        id: Endpoint,
        addr: &str,
        spec: StackSpec,
        rv: Rendezvous,
        receives: bool,
    ) -> Arc<Self> {
        let (out_tx, out_rx) = mpsc::unbounded_channel();
        let m = Arc::new(Member {
            id,
            addr: addr.to_string(),
            spec,
            topic: topic.clone(),
            rv,
            receives,
            state: Mutex::new(MemberState {
                joined: None,
                epochs: BTreeMap::new(),
            }),
            out_tx,
            out_rx: tokio::sync::Mutex::new(out_rx),
            node: std::sync::OnceLock::new(),
            serve: Mutex::new(None),
        });
        let cfg = TwoPcConfig {
            exclusive: false,
            ..TwoPcConfig::default()
        };
        let hooks = Arc::new(MemberHooks {
            member: Arc::downgrade(&m),
        });
        let node = TwoPcNode::new(id, TopicBus::new(topic.clone(), id), hooks, cfg);
        let _ = m.node.set(node.clone());
        let mut rx = topic.control(id);
        let serve = tokio::spawn(async move {
            while let Some((from, msg)) = rx.recv().await {
                let node = node.clone();
                tokio::spawn(async move { node.handle(from, msg).await });
            }
        });
        *m.serve.lock() = Some(serve.abort_handle());
        m
    }

    pub fn id(&self) -> Endpoint {
        self.id
    }

    pub fn joined(&self) -> Option<Joined> {
        self.state.lock().joined.clone()
    }

    pub fn epoch(&self) -> Option<u64> {
        self.state.lock().joined.as_ref().map(|j| j.epoch)
    }

    pub fn node(&self) -> &Arc<TwoPcNode<Joined>> {
        self.node.get().expect("set in new")
    }

    pub fn rendezvous(&self) -> &Rendezvous {
        &self.rv
    }

    /// Join through the store and build the stored stack.
    pub async fn join(&self) -> Result<JoinOutcome> {
        let out = self.rv.join(&self.addr, &self.spec).await?;
        if let Some(j) = out.joined() {
            self.install(j.clone()).await?;
        }
        Ok(out)
    }

    /// Move every member to `stack` by 2PC over the topic. A member that could
    /// not join the current stack joins the new one once it commits.
    pub async fn transition(&self, stack: Vec<Capability>) -> Result<Joined> {
        let peers: Vec<Endpoint> = self
            .topic
            .members()
            .into_iter()
            .filter(|p| *p != self.id)
            .collect();
        let was_joined = self.joined().is_some();
        let choice = self
            .spec
            .offer()
            .into_iter()
            .find(|(_, caps)| crate::negotiate::stacks_compatible(caps, &stack).is_some())
            .map(|(c, _)| c)
            .ok_or(Error::NoCompatibleStack)?;
        let entry = self
            .rv
            .propose_transition(&self.addr, stack, self.node(), &peers, |_| {
                Box::pin(async { Ok(()) })
            })
            .await?;
        if was_joined {
            let count = self.joined().map(|j| j.count).unwrap_or(entry.count);
            let j = Joined {
                epoch: entry.epoch,
                choice,
                stack: entry.stack,
                count,
            };
            self.install(j.clone()).await?;
            Ok(j)
        } else {
            match self.join().await? {
                JoinOutcome::Adopted(j) | JoinOutcome::Won(j) => Ok(j),
                JoinOutcome::Incompatible(_) => Err(Error::CasConflict),
            }
        }
    }

    async fn install(&self, j: Joined) -> Result<()> {
        let cx = WrapContext {
            epoch: j.epoch,
            nonce: Some(j.nonce()),
        };
        let inst = self.spec.instantiate(&j.choice, Lower::Unit, &cx).await?;
        let pump = self.receives.then(|| {
            let conn = inst.conn.clone();
            let out = self.out_tx.clone();
            let epoch = j.epoch;
            tokio::spawn(async move {
                let mut slots: Vec<Option<Msg>> = (0..32).map(|_| None).collect();
                loop {
                    match conn.recv(&mut slots).await {
                        Ok(k) => {
                            for m in slots[..k].iter_mut().filter_map(Option::take) {
                                if out.send((epoch, Ok(m))).is_err() {
                                    return;
                                }
                            }
                        }
                        Err(e) => {
                            let _ = out.send((epoch, Err(e)));
                            return;
                        }
                    }
                }
            })
            .abort_handle()
        });
        let mut st = self.state.lock();
        if st.joined.as_ref().is_some_and(|cur| cur.epoch >= j.epoch) {
            return Ok(());
        }
        st.epochs.insert(
            j.epoch,
            Epoch {
                conn: inst.conn,
                pump,
            },
        );
        // the epoch before stays up to drain what is still in flight
        while st.epochs.len() > 2 {
            st.epochs.pop_first();
        }
        tracing::info!(member = %self.id, epoch = j.epoch, "stack installed");
        st.joined = Some(j);
        Ok(())
    }

    pub async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        let conn = {
            let st = self.state.lock();
            let e = st.joined.as_ref().ok_or(Error::NotJoined)?.epoch;
            st.epochs[&e].conn.clone()
        };
        conn.send(batch).await
    }

    /// Next received message and the epoch whose stack delivered it. An
    /// epoch's receive error is reported once; the other epoch keeps going.
    pub async fn recv(&self) -> Result<(u64, Msg)> {
        let (epoch, r) = self
            .out_rx
            .lock()
            .await
            .recv()
            .await
            .ok_or(Error::ConnectionClosed)?;
        r.map(|m| (epoch, m))
    }
}
