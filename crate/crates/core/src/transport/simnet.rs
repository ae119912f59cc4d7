//! Deterministic in-memory datagram network.
//!
//! Delays are measured on the tokio clock, so under a paused runtime they are
//! virtual and the runtime's auto-advance acts as the network driver. All
//! random draws come from one seeded ChaCha stream in send order, and
//! deliveries due at the same instant are released in send order, so the
//! same seed and send schedule always produce the same delivery trace.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::{mpsc, Notify};
use tokio::time::Instant;

use super::{BaseSocket, MAX_DATAGRAM};
use crate::datapath::Endpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SimNetConfig {
    pub loss: f64,
    pub duplicate: f64,
    pub reorder: f64,
    /// Fixed one-way delay.
    pub delay: Duration,
    /// Uniform extra delay in `[0, jitter]`.
    pub jitter: Duration,
    pub seed: u64,
    /// Keep a byte-exact log of every delivery.
    pub trace: bool,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig {
            loss: 0.0,
            duplicate: 0.0,
            reorder: 0.0,
            delay: Duration::ZERO,
            jitter: Duration::ZERO,
            seed: 0,
            trace: false,
        }
    }
}

impl SimNetConfig {
    pub fn lossless(delay: Duration) -> Self {
        SimNetConfig {
            delay,
            trace: true,
            ..Default::default()
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn loss(mut self, p: f64) -> Self {
        self.loss = p;
        self
    }

    pub fn duplicate(mut self, p: f64) -> Self {
        self.duplicate = p;
        self
    }

    pub fn reorder(mut self, p: f64) -> Self {
        self.reorder = p;
        self
    }

    pub fn jitter(mut self, j: Duration) -> Self {
        self.jitter = j;
        self
    }

    pub fn traced(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    /// Time since the network was created.
    pub at: Duration,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
    pub unroutable: u64,
}

type Packet = (Endpoint, Vec<u8>);
type Inbox = mpsc::UnboundedSender<Packet>;

struct Pending {
    at: Instant,
    order: u64,
    src: Endpoint,
    dst: Endpoint,
    payload: Vec<u8>,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.order) == (o.at, o.order)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.order).cmp(&(o.at, o.order))
    }
}

/// Observer invoked for every packet handed to the network, before loss.
pub type SendHook = Box<dyn Fn(Endpoint, Endpoint, &[u8]) + Send + Sync>;

struct NetState {
    cfg: SimNetConfig,
    rng: ChaCha8Rng,
    sockets: BTreeMap<Endpoint, Inbox>,
    /// Loss overrides for traffic toward a destination.
    dst_loss: BTreeMap<Endpoint, f64>,
    /// Deterministic drops of the next `n` packets on a link.
    drop_next: BTreeMap<(Endpoint, Endpoint), u32>,
    /// Extra processing delay added to packets leaving a given endpoint.
    egress_delay: BTreeMap<Endpoint, Duration>,
    queue: BinaryHeap<Reverse<Pending>>,
    order: u64,
    trace: Vec<Delivery>,
    stats: NetStats,
    pump: bool,
    hooks: Vec<SendHook>,
}

struct NetInner {
    state: Mutex<NetState>,
    wake: Arc<Notify>,
    start: Instant,
}

impl Drop for NetInner {
    fn drop(&mut self) {
        // let the pump observe that the network is gone
        self.wake.notify_one();
    }
}

#[derive(Clone)]
pub struct SimNet {
    inner: Arc<NetInner>,
}

impl std::fmt::Debug for SimNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimNet").finish_non_exhaustive()
    }
}

impl SimNet {
    pub fn new(cfg: SimNetConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        SimNet {
            inner: Arc::new(NetInner {
                state: Mutex::new(NetState {
                    cfg,
                    rng,
                    sockets: BTreeMap::new(),
                    dst_loss: BTreeMap::new(),
                    drop_next: BTreeMap::new(),
                    egress_delay: BTreeMap::new(),
                    queue: BinaryHeap::new(),
                    order: 0,
                    trace: Vec::new(),
                    stats: NetStats::default(),
                    pump: false,
                    hooks: Vec::new(),
                }),
                wake: Arc::new(Notify::new()),
                start: Instant::now(),
            }),
        }
    }

    /// Zero-delay lossless network; the in-memory transport.
    pub fn in_memory() -> Self {
        Self::new(SimNetConfig::default())
    }

    pub fn bind(&self, ep: Endpoint) -> Result<SimSocket> {
        self.bind_many(&[ep])
    }

    /// Bind several addresses that share one inbox.
    pub fn bind_many(&self, eps: &[Endpoint]) -> Result<SimSocket> {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut st = self.inner.state.lock();
        if let Some(ep) = eps.iter().find(|e| st.sockets.contains_key(e)) {
            return Err(Error::AddressInUse(ep.to_string()));
        }
        for ep in eps {
            st.sockets.insert(*ep, tx.clone());
        }
        Ok(SimSocket {
            net: self.clone(),
            locals: eps.to_vec(),
            rx: tokio::sync::Mutex::new(rx),
        })
    }

    pub fn now(&self) -> Duration {
        Instant::now() - self.inner.start
    }

    pub fn trace(&self) -> Vec<Delivery> {
        self.inner.state.lock().trace.clone()
    }

    pub fn stats(&self) -> NetStats {
        self.inner.state.lock().stats
    }

    pub fn set_loss(&self, p: f64) {
        self.inner.state.lock().cfg.loss = p;
    }

    /// Override the loss probability for packets sent to `dst`.
    pub fn set_loss_to(&self, dst: Endpoint, p: f64) {
        self.inner.state.lock().dst_loss.insert(dst, p);
    }

    /// Drop the next `n` packets sent from `src` to `dst`.
    pub fn drop_next(&self, src: Endpoint, dst: Endpoint, n: u32) {
        self.inner.state.lock().drop_next.insert((src, dst), n);
    }

    /// Add a fixed processing delay to everything sent from `src`.
    pub fn set_egress_delay(&self, src: Endpoint, d: Duration) {
        self.inner.state.lock().egress_delay.insert(src, d);
    }

    pub fn on_send(&self, hook: SendHook) {
        self.inner.state.lock().hooks.push(hook);
    }

    fn unbind(&self, eps: &[Endpoint]) {
        let mut st = self.inner.state.lock();
        for ep in eps {
            st.sockets.remove(ep);
        }
    }

    fn submit(&self, src: Endpoint, dst: Endpoint, payload: &[u8]) -> Result<()> {
        if payload.len() > MAX_DATAGRAM {
            return Err(Error::PayloadTooLarge(payload.len()));
        }
        let now = Instant::now();
        let mut guard = self.inner.state.lock();
        let st = &mut *guard;
        st.stats.sent += 1;
        for h in &st.hooks {
            h(src, dst, payload);
        }
        if let Some(n) = st.drop_next.get_mut(&(src, dst)) {
            if *n > 0 {
                *n -= 1;
                st.stats.dropped += 1;
                return Ok(());
            }
        }
        let loss = st.dst_loss.get(&dst).copied().unwrap_or(st.cfg.loss);
        let lost = draw(&mut st.rng, loss);
        let dup = draw(&mut st.rng, st.cfg.duplicate);
        if lost {
            st.stats.dropped += 1;
            return Ok(());
        }
        let copies = if dup {
            st.stats.duplicated += 1;
            2
        } else {
            1
        };
        let egress = st.egress_delay.get(&src).copied().unwrap_or_default();
        let mut need_pump = false;
        for _ in 0..copies {
            let mut d = st.cfg.delay + egress;
            if !st.cfg.jitter.is_zero() {
                d += st.cfg.jitter.mul_f64(st.rng.gen::<f64>());
            }
            if draw(&mut st.rng, st.cfg.reorder) {
                // hold back long enough for later packets to overtake
                let span = (st.cfg.delay + st.cfg.jitter) * 2 + Duration::from_millis(1);
                d += span.mul_f64(st.rng.gen::<f64>());
            }
            if d.is_zero() && st.queue.is_empty() {
                deliver(st, self.inner.start, now, src, dst, payload.to_vec());
            } else {
                st.order += 1;
                let order = st.order;
                st.queue.push(Reverse(Pending {
                    at: now + d,
                    order,
                    src,
                    dst,
                    payload: payload.to_vec(),
                }));
                need_pump = true;
            }
        }
        if need_pump {
            if !st.pump {
                st.pump = true;
                let weak = Arc::downgrade(&self.inner);
                tokio::spawn(pump(weak, self.inner.wake.clone()));
            }
            drop(guard);
            self.inner.wake.notify_one();
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, p: f64) -> bool {
    // always consume one draw so the stream position depends only on the schedule
    let x: f64 = rng.gen();
    x < p
}

fn deliver(
    st: &mut NetState,
    start: Instant,
    at: Instant,
    src: Endpoint,
    dst: Endpoint,
    payload: Vec<u8>,
) {
    match st.sockets.get(&dst) {
        Some(tx) => {
            if st.cfg.trace {
                st.trace.push(Delivery {
                    at: at - start,
                    src,
                    dst,
                    payload: payload.clone(),
                });
            }
            if tx.send((src, payload)).is_ok() {
                st.stats.delivered += 1;
            } else {
                st.stats.unroutable += 1;
            }
        }
        None => st.stats.unroutable += 1,
    }
}

async fn pump(net: Weak<NetInner>, wake_on: Arc<Notify>) {
    loop {
        let Some(inner) = net.upgrade() else { return };
        let next = {
            let mut guard = inner.state.lock();
            let st = &mut *guard;
            let now = Instant::now();
            while st.queue.peek().is_some_and(|p| p.0.at <= now) {
                let Reverse(p) = st.queue.pop().unwrap();
                deliver(st, inner.start, p.at, p.src, p.dst, p.payload);
            }
            st.queue.peek().map(|p| p.0.at)
        };
        let wake = wake_on.notified();
        tokio::pin!(wake);
        wake.as_mut().enable();
        drop(inner);
        match next {
            Some(at) => {
                tokio::select! {
                    biased;
                    _ = tokio::time::sleep_until(at) => {}
                    _ = &mut wake => {}
                }
            }
            None => wake.await,
        }
    }
}

pub struct SimSocket {
    net: SimNet,
    locals: Vec<Endpoint>,
    rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<Packet>>,
}

impl SimSocket {
    pub fn net(&self) -> &SimNet {
        &self.net
    }
}

impl Drop for SimSocket {
    fn drop(&mut self) {
        self.net.unbind(&self.locals);
    }
}

#[async_trait]
impl BaseSocket for SimSocket {
    fn local(&self) -> Endpoint {
        self.locals[0]
    }

    fn locals(&self) -> Vec<Endpoint> {
        self.locals.clone()
    }

    async fn send_to(&self, peer: Endpoint, payload: &[u8]) -> Result<()> {
        self.net.submit(self.locals[0], peer, payload)
    }

    async fn send_from(&self, local: Endpoint, peer: Endpoint, payload: &[u8]) -> Result<()> {
        if !self.locals.contains(&local) {
            return Err(Error::layer("simnet", format!("{local} not bound here")));
        }
        self.net.submit(local, peer, payload)
    }

    async fn recv_from(&self) -> Result<(Endpoint, Vec<u8>)> {
        let mut rx = self.rx.lock().await;
        rx.recv().await.ok_or(Error::ConnectionClosed)
    }

    async fn recv_batch(&self, out: &mut Vec<(Endpoint, Vec<u8>)>, limit: usize) -> Result<usize> {
        let mut rx = self.rx.lock().await;
        match rx.recv_many(out, limit).await {
            0 => Err(Error::ConnectionClosed),
            n => Ok(n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test(start_paused = true)]
    async fn lossless_delivery() {
        let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(5)));
        let a = net.bind(Endpoint::sim(1, 1)).unwrap();
        let b = net.bind(Endpoint::sim(2, 1)).unwrap();
        a.send_to(b.local(), b"hi").await.unwrap();
        let (from, m) = b.recv_from().await.unwrap();
        assert_eq!((from, m.as_slice()), (a.local(), &b"hi"[..]));
        assert_eq!(net.trace()[0].at, Duration::from_millis(5));
    }

    #[tokio::test(start_paused = true)]
    async fn address_in_use() {
        let net = SimNet::in_memory();
        let _a = net.bind(Endpoint::sim(1, 1)).unwrap();
        assert!(matches!(
            net.bind(Endpoint::sim(1, 1)),
            Err(Error::AddressInUse(_))
        ));
    }

    #[tokio::test(start_paused = true)]
    async fn unbind_on_drop() {
        let net = SimNet::in_memory();
        drop(net.bind(Endpoint::sim(1, 1)).unwrap());
        net.bind(Endpoint::sim(1, 1)).unwrap();
    }

    #[tokio::test(start_paused = true)]
    async fn total_loss() {
        let net = SimNet::new(SimNetConfig::default().loss(1.0));
        let a = net.bind(Endpoint::sim(1, 1)).unwrap();
        let b = net.bind(Endpoint::sim(2, 1)).unwrap();
        for _ in 0..100 {
            a.send_to(b.local(), b"x").await.unwrap();
        }
        tokio::time::sleep(Duration::from_secs(1)).await;
        assert_eq!(net.stats().delivered, 0);
        assert_eq!(net.stats().dropped, 100);
    }

    #[tokio::test(start_paused = true)]
    async fn forced_duplication() {
        let net = SimNet::new(SimNetConfig::default().duplicate(1.0));
        let a = net.bind(Endpoint::sim(1, 1)).unwrap();
        let b = net.bind(Endpoint::sim(2, 1)).unwrap();
        a.send_to(b.local(), b"dup").await.unwrap();
        assert_eq!(b.recv_from().await.unwrap().1, b"dup");
        assert_eq!(b.recv_from().await.unwrap().1, b"dup");
        assert_eq!(net.stats().delivered, 2);
    }

    #[tokio::test(start_paused = true)]
    async fn oversize_payload() {
        let net = SimNet::in_memory();
        let a = net.bind(Endpoint::sim(1, 1)).unwrap();
        let big = vec![0u8; MAX_DATAGRAM + 1];
        assert!(matches!(
            a.send_to(Endpoint::sim(2, 1), &big).await,
            Err(Error::PayloadTooLarge(_))
        ));
        a.send_to(Endpoint::sim(2, 1), &big[..MAX_DATAGRAM])
            .await
            .unwrap();
    }

    #[tokio::test(start_paused = true)]
    async fn drop_next_is_deterministic() {
        let net = SimNet::new(SimNetConfig::lossless(Duration::from_millis(1)));
        let a = net.bind(Endpoint::sim(1, 1)).unwrap();
        let b = net.bind(Endpoint::sim(2, 1)).unwrap();
        net.drop_next(a.local(), b.local(), 1);
        a.send_to(b.local(), b"1").await.unwrap();
        a.send_to(b.local(), b"2").await.unwrap();
        assert_eq!(b.recv_from().await.unwrap().1, b"2");
    }
}
