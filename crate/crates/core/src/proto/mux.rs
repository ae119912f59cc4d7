//! Demultiplexes one base connection into per-connection-id control
//! channels and data queues.
//!
//! Control frames (every tag but DATA) ride a stop-and-wait reliable channel
//! keyed by (peer, connection id). DATA frames bypass it and are queued by
//! (connection id, epoch); the frame's sequence field carries the epoch of
//! the stack that produced it.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::{mpsc, watch};
use tokio::task::AbortHandle;

use super::frame::{Frame, Tag};
use crate::datapath::{Conn, DataType, Datapath, Endpoint, Msg};
use crate::error::{Error, Result};

/// Retransmission schedule for control frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReliableConfig {
    pub initial_timeout: Duration,
    pub max_attempts: u32,
    /// Backoff stops doubling here.
    pub max_backoff: Duration,
}

impl Default for ReliableConfig {
    fn default() -> Self {
        ReliableConfig {
            initial_timeout: Duration::from_millis(100),
            max_attempts: 5,
            max_backoff: Duration::from_millis(1600),
        }
    }
}

impl ReliableConfig {
    /// Keeps retrying for minutes; used where giving up would be unsafe.
    pub fn persistent() -> Self {
        ReliableConfig {
            max_attempts: 120,
            ..Default::default()
        }
    }
}

/// Datagrams queued per (connection id, epoch) before anyone opens it.
const PENDING_PER_QUEUE: usize = 4096;
const PENDING_QUEUES: usize = 1024;

type Inbox = mpsc::UnboundedReceiver<(Tag, Vec<u8>)>;

struct RecvState {
    delivered: u64,
    buffered: BTreeMap<u64, (Tag, Vec<u8>)>,
}

struct ChanState {
    next_seq: tokio::sync::Mutex<u64>,
    acked: watch::Sender<u64>,
    recv: Mutex<RecvState>,
    inbox_tx: mpsc::UnboundedSender<(Tag, Vec<u8>)>,
    inbox: Arc<tokio::sync::Mutex<Inbox>>,
}

impl ChanState {
    fn new() -> Arc<Self> {
        let (tx, rx) = mpsc::unbounded_channel();
        Arc::new(ChanState {
            next_seq: tokio::sync::Mutex::new(1),
            acked: watch::channel(0).0,
            recv: Mutex::new(RecvState {
                delivered: 0,
                buffered: BTreeMap::new(),
            }),
            inbox_tx: tx,
            inbox: Arc::new(tokio::sync::Mutex::new(rx)),
        })
    }
}

enum DataSlot {
    Open(mpsc::UnboundedSender<(Endpoint, Vec<u8>)>),
    Pending(VecDeque<(Endpoint, Vec<u8>)>),
    Closed,
}

#[derive(Default)]
struct MuxState {
    chans: HashMap<(Endpoint, u64), Arc<ChanState>>,
    data: HashMap<(u64, u64), DataSlot>,
    pending_queues: usize,
}

/// Counters for tests and diagnostics.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MuxStats {
    pub control_sent: u64,
    pub retransmits: u64,
    pub acks_sent: u64,
    pub data_sent: u64,
    pub data_dropped: u64,
    pub malformed: u64,
}

struct MuxShared {
    base: Conn,
    local: Option<Endpoint>,
    state: Mutex<MuxState>,
    incoming_tx: mpsc::UnboundedSender<ControlChannel>,
    incoming: tokio::sync::Mutex<mpsc::UnboundedReceiver<ControlChannel>>,
    pump: Mutex<Option<AbortHandle>>,
    stats: Mutex<MuxStats>,
}

impl Drop for MuxShared {
    fn drop(&mut self) {
        if let Some(h) = self.pump.lock().take() {
            h.abort();
        }
    }
}

#[derive(Clone)]
pub struct Mux {
    shared: Arc<MuxShared>,
}

impl std::fmt::Debug for Mux {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mux")
            .field("local", &self.shared.local)
            .finish()
    }
}

impl Mux {
    /// Take over a byte connection. Must be called inside a tokio runtime.
    pub fn new(base: Conn, local: Option<Endpoint>) -> Mux {
        let (tx, rx) = mpsc::unbounded_channel();
        let shared = Arc::new(MuxShared {
            base: base.clone(),
            local,
            state: Mutex::new(MuxState::default()),
            incoming_tx: tx,
            incoming: tokio::sync::Mutex::new(rx),
            pump: Mutex::new(None),
            stats: Mutex::new(MuxStats::default()),
        });
        let task = tokio::spawn(pump(base, Arc::downgrade(&shared)));
        *shared.pump.lock() = Some(task.abort_handle());
        Mux { shared }
    }

    /// Bind `ep` on a simulated network and multiplex it.
    pub fn bind_sim(net: &crate::transport::SimNet, ep: Endpoint) -> Result<Mux> {
        let sock = net.bind(ep)?;
        let dp = crate::transport::SocketDatapath::new(Arc::new(sock));
        Ok(Mux::new(Arc::new(dp), Some(ep)))
    }

    pub async fn bind_udp(addr: std::net::SocketAddr) -> Result<Mux> {
        let sock = crate::transport::UdpSocketBase::bind(addr).await?;
        let local = crate::transport::BaseSocket::local(&sock);
        let dp = crate::transport::SocketDatapath::new(Arc::new(sock));
        Ok(Mux::new(Arc::new(dp), Some(local)))
    }

    pub fn local(&self) -> Option<Endpoint> {
        self.shared.local
    }

    pub fn stats(&self) -> MuxStats {
        *self.shared.stats.lock()
    }

    /// The control channel to `peer` for `conn_id`, created on first use.
    pub fn channel(&self, peer: Endpoint, conn_id: u64) -> ControlChannel {
        let st = self
            .shared
            .state
            .lock()
            .chans
            .entry((peer, conn_id))
            .or_insert_with(ChanState::new)
            .clone();
        ControlChannel {
            mux: self.clone(),
            peer,
            conn_id,
            state: st,
        }
    }

    /// Next control channel opened by a remote peer.
    pub async fn accept(&self) -> Result<ControlChannel> {
        self.shared
            .incoming
            .lock()
            .await
            .recv()
            .await
            .ok_or(Error::ConnectionClosed)
    }

    pub fn forget_channel(&self, peer: Endpoint, conn_id: u64) {
        self.shared.state.lock().chans.remove(&(peer, conn_id));
    }

    /// Byte datapath for DATA frames of (`conn_id`, `epoch`). Messages whose
    /// address is unspecified go to `peer`.
    pub fn open_data(&self, conn_id: u64, epoch: u64, peer: Endpoint) -> Arc<SessionConn> {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut st = self.shared.state.lock();
        if let Some(DataSlot::Pending(q)) = st.data.remove(&(conn_id, epoch)) {
            st.pending_queues -= 1;
            for item in q {
                let _ = tx.send(item);
            }
        }
        st.data.insert((conn_id, epoch), DataSlot::Open(tx));
        Arc::new(SessionConn {
            mux: self.clone(),
            conn_id,
            epoch,
            peer,
            rx: tokio::sync::Mutex::new(rx),
        })
    }

    /// Drop DATA for (`conn_id`, `epoch`) from now on.
    pub fn close_data(&self, conn_id: u64, epoch: u64) {
        let mut st = self.shared.state.lock();
        if let Some(DataSlot::Pending(_)) = st.data.insert((conn_id, epoch), DataSlot::Closed) {
            st.pending_queues -= 1;
        }
    }

    pub(crate) async fn transmit(&self, peer: Endpoint, bytes: Vec<u8>) -> Result<()> {
        self.shared.base.send(vec![Msg::bytes(peer, bytes)]).await
    }

    async fn handle(&self, from: Endpoint, buf: &[u8]) {
        let frame = match Frame::decode(buf) {
            Ok(f) => f,
            Err(e) => {
                tracing::debug!(%from, "dropping frame: {e}");
                self.shared.stats.lock().malformed += 1;
                return;
            }
        };
        match frame.tag {
            Tag::Data => self.on_data(from, frame),
            Tag::Ack => {
                let st = self
                    .shared
                    .state
                    .lock()
                    .chans
                    .get(&(from, frame.conn_id))
                    .cloned();
                if let Some(st) = st {
                    st.acked.send_if_modified(|v| {
                        let grew = frame.seq > *v;
                        *v = (*v).max(frame.seq);
                        grew
                    });
                }
            }
            tag => {
                let (st, fresh) = {
                    let mut s = self.shared.state.lock();
                    match s.chans.get(&(from, frame.conn_id)) {
                        Some(st) => (st.clone(), false),
                        None => {
                            let st = ChanState::new();
                            s.chans.insert((from, frame.conn_id), st.clone());
                            (st, true)
                        }
                    }
                };
                if fresh {
                    let ch = ControlChannel {
                        mux: self.clone(),
                        peer: from,
                        conn_id: frame.conn_id,
                        state: st.clone(),
                    };
                    let _ = self.shared.incoming_tx.send(ch);
                }
                let cum = {
                    let mut r = st.recv.lock();
                    if frame.seq == r.delivered + 1 {
                        let _ = st.inbox_tx.send((tag, frame.payload));
                        r.delivered += 1;
                        loop {
                            let next = r.delivered + 1;
                            match r.buffered.remove(&next) {
                                Some(item) => {
                                    let _ = st.inbox_tx.send(item);
                                    r.delivered = next;
                                }
                                None => break,
                            }
                        }
                    } else if frame.seq > r.delivered {
                        r.buffered.entry(frame.seq).or_insert((tag, frame.payload));
                    }
                    r.delivered
                };
                let ack = Frame::new(Tag::Ack, frame.conn_id, cum, Vec::new()).encode();
                self.shared.stats.lock().acks_sent += 1;
                let _ = self.transmit(from, ack).await;
            }
        }
    }

    fn on_data(&self, from: Endpoint, frame: Frame) {
        let mut st = self.shared.state.lock();
        let key = (frame.conn_id, frame.seq);
        let dropped = match st.data.get_mut(&key) {
            Some(DataSlot::Open(tx)) => tx.send((from, frame.payload)).is_err(),
            Some(DataSlot::Pending(q)) => {
                if q.len() < PENDING_PER_QUEUE {
                    q.push_back((from, frame.payload));
                    false
                } else {
                    true
                }
            }
            Some(DataSlot::Closed) => true,
            None => {
                if st.pending_queues < PENDING_QUEUES {
                    st.pending_queues += 1;
                    st.data.insert(
                        key,
                        DataSlot::Pending(VecDeque::from([(from, frame.payload)])),
                    );
                    false
                } else {
                    true
                }
            }
        };
        drop(st);
        if dropped {
            self.shared.stats.lock().data_dropped += 1;
        }
    }
}

async fn pump(base: Conn, mux: Weak<MuxShared>) {
    let mut slots = vec![None; 64];
    loop {
        let n = match base.recv(&mut slots).await {
            Ok(n) => n,
            Err(e) => {
                tracing::debug!("mux base closed: {e}");
                return;
            }
        };
        let Some(shared) = mux.upgrade() else { return };
        let m = Mux { shared };
        for slot in slots[..n].iter_mut() {
            if let Some(msg) = slot.take() {
                if let Ok((from, b)) = msg.into_bytes("mux") {
                    m.handle(from, &b).await;
                }
            }
        }
    }
}

/// Reliable, ordered control frames between this endpoint and one peer for
/// one connection id. Each direction has its own sequence space starting at 1;
/// an ACK carries the highest in-order sequence received.
#[derive(Clone)]
pub struct ControlChannel {
    mux: Mux,
    peer: Endpoint,
    conn_id: u64,
    state: Arc<ChanState>,
}

impl std::fmt::Debug for ControlChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlChannel")
            .field("peer", &self.peer)
            .field("conn_id", &self.conn_id)
            .finish()
    }
}

impl ControlChannel {
    pub fn peer(&self) -> Endpoint {
        self.peer
    }

    pub fn conn_id(&self) -> u64 {
        self.conn_id
    }

    pub fn mux(&self) -> &Mux {
        &self.mux
    }

    pub async fn send(&self, tag: Tag, payload: Vec<u8>) -> Result<()> {
        self.send_with(tag, payload, ReliableConfig::default())
            .await
    }

    /// Stop-and-wait: transmit until a cumulative ACK covers the frame.
    pub async fn send_with(&self, tag: Tag, payload: Vec<u8>, cfg: ReliableConfig) -> Result<()> {
        if tag == Tag::Data || tag == Tag::Ack {
            return Err(Error::MalformedFrame(format!(
                "{tag:?} is not a reliable control tag"
            )));
        }
        let mut next = self.state.next_seq.lock().await;
        let seq = *next;
        *next += 1;
        let bytes = Frame::new(tag, self.conn_id, seq, payload).encode();
        let mut acked = self.state.acked.subscribe();
        let mut wait = cfg.initial_timeout;
        for attempt in 0..cfg.max_attempts {
            {
                let mut s = self.mux.shared.stats.lock();
                s.control_sent += 1;
                if attempt > 0 {
                    s.retransmits += 1;
                }
            }
            self.mux.transmit(self.peer, bytes.clone()).await?;
            let deadline = tokio::time::Instant::now() + wait;
            loop {
                if *acked.borrow_and_update() >= seq {
                    return Ok(());
                }
                match tokio::time::timeout_at(deadline, acked.changed()).await {
                    Err(_) => break,
                    Ok(Err(_)) => return Err(Error::ConnectionClosed),
                    Ok(Ok(())) => {}
                }
            }
            wait = (wait * 2).min(cfg.max_backoff);
        }
        Err(Error::PeerUnreachable)
    }

    /// Next control frame from the peer, in sequence order, exactly once.
    pub async fn recv(&self) -> Result<(Tag, Vec<u8>)> {
        self.state
            .inbox
            .lock()
            .await
            .recv()
            .await
            .ok_or(Error::ConnectionClosed)
    }

    pub fn try_recv(&self) -> Option<(Tag, Vec<u8>)> {
        self.state.inbox.try_lock().ok()?.try_recv().ok()
    }
}

/// DATA frames of one (connection id, epoch) as a byte datapath.
pub struct SessionConn {
    mux: Mux,
    conn_id: u64,
    epoch: u64,
    peer: Endpoint,
    rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<(Endpoint, Vec<u8>)>>,
}

impl SessionConn {
    pub fn conn_id(&self) -> u64 {
        self.conn_id
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn peer(&self) -> Endpoint {
        self.peer
    }
}

impl Drop for SessionConn {
    fn drop(&mut self) {
        self.mux.close_data(self.conn_id, self.epoch);
    }
}

#[async_trait]
impl Datapath for SessionConn {
    fn data_type(&self) -> DataType {
        DataType::Bytes
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let n = batch.len() as u64;
        let out = batch
            .into_iter()
            .map(|m| {
                let (addr, b) = m.into_bytes("session")?;
                let to = if addr == Endpoint::unspecified() {
                    self.peer
                } else {
                    addr
                };
                Ok(Msg::bytes(
                    to,
                    Frame::new(Tag::Data, self.conn_id, self.epoch, b).encode(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        self.mux.shared.stats.lock().data_sent += n;
        self.mux.shared.base.send(out).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        let mut rx = self.rx.lock().await;
        let mut buf = Vec::with_capacity(slots.len());
        let n = rx.recv_many(&mut buf, slots.len()).await;
        if n == 0 {
            return Err(Error::ConnectionClosed);
        }
        for (slot, (from, b)) in slots.iter_mut().zip(buf) {
            *slot = Some(Msg::bytes(from, b));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{SimNet, SimNetConfig};

    fn pair(net: &SimNet) -> (Mux, Mux) {
        (
            Mux::bind_sim(net, Endpoint::sim(1, 1)).unwrap(),
            Mux::bind_sim(net, Endpoint::sim(2, 1)).unwrap(),
        )
    }

    #[tokio::test(start_paused = true)]
    async fn one_transmission_one_ack() {
        let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(5)));
        let (a, b) = pair(&net);
        let ch = a.channel(Endpoint::sim(2, 1), 7);
        ch.send(Tag::Hello, b"hi".to_vec()).await.unwrap();
        let inc = b.accept().await.unwrap();
        assert_eq!(inc.recv().await.unwrap(), (Tag::Hello, b"hi".to_vec()));
        assert_eq!(a.stats().control_sent, 1);
        assert_eq!(b.stats().acks_sent, 1);
        assert_eq!(net.stats().delivered, 2);
    }

    #[tokio::test(start_paused = true)]
    async fn single_retransmission_after_drop() {
        let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(5)));
        let (a, b) = pair(&net);
        net.drop_next(Endpoint::sim(1, 1), Endpoint::sim(2, 1), 1);
        let ch = a.channel(Endpoint::sim(2, 1), 7);
        ch.send(Tag::Prepare, b"p".to_vec()).await.unwrap();
        assert_eq!(a.stats().retransmits, 1);
        let first = &net.trace()[0];
        assert_eq!(first.dst, Endpoint::sim(2, 1));
        assert_eq!(first.at, Duration::from_millis(105));
        let inc = b.accept().await.unwrap();
        assert_eq!(inc.recv().await.unwrap().1, b"p");
    }

    #[tokio::test(start_paused = true)]
    async fn total_loss_is_unreachable() {
        let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(1)).loss(1.0));
        let (a, _b) = pair(&net);
        let start = tokio::time::Instant::now();
        let e = a
            .channel(Endpoint::sim(2, 1), 1)
            .send(Tag::Hello, vec![])
            .await;
        assert!(matches!(e, Err(Error::PeerUnreachable)));
        assert_eq!(start.elapsed(), Duration::from_millis(3100));
        assert_eq!(a.stats().control_sent, 5);
    }

    #[tokio::test(start_paused = true)]
    async fn lossy_channel_is_exactly_once_in_order() {
        let cfg = SimNetConfig::lossless(Duration::from_millis(2))
            .loss(0.3)
            .duplicate(0.2)
            .reorder(0.2)
            .jitter(Duration::from_millis(3))
            .seed(11);
        let net = SimNet::new(cfg);
        let (a, b) = pair(&net);
        let ch = a.channel(Endpoint::sim(2, 1), 3);
        let sender = tokio::spawn(async move {
            for i in 0..200u32 {
                ch.send_with(
                    Tag::Commit,
                    i.to_be_bytes().to_vec(),
                    ReliableConfig::persistent(),
                )
                .await
                .unwrap();
            }
        });
        let inc = b.accept().await.unwrap();
        for i in 0..200u32 {
            let (_, p) = inc.recv().await.unwrap();
            assert_eq!(p, i.to_be_bytes());
        }
        sender.await.unwrap();
        assert!(inc.try_recv().is_none());
    }

    #[tokio::test(start_paused = true)]
    async fn data_bypasses_reliability_and_buffers_early_arrivals() {
        let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(1)));
        let (a, b) = pair(&net);
        let tx = a.open_data(9, 1, Endpoint::sim(2, 1));
        tx.send(vec![Msg::bytes(Endpoint::unspecified(), b"early".to_vec())])
            .await
            .unwrap();
        tokio::time::sleep(Duration::from_millis(5)).await;
        let rx = b.open_data(9, 1, Endpoint::sim(1, 1));
        let m = crate::datapath::recv_one(&*rx).await.unwrap();
        assert_eq!(m, Msg::bytes(Endpoint::sim(1, 1), b"early".to_vec()));
        assert_eq!(a.stats().control_sent, 0);
        assert_eq!(b.stats().acks_sent, 0);
    }
}
