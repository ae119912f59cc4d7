//! Per-destination sliding-window ARQ.
//!
//! ```text
//! data := 0x01 seq:u64 payload
//! ack  := 0x02 cum:u64 n:u16 sack:u64*n
//! ```
//!
//! Sequence numbers start at 1 per (sender, receiver) pair. `cum` is the
//! highest sequence number below which everything arrived; `sack` lists
//! buffered numbers above it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::{mpsc, Notify};
use tokio::task::AbortHandle;
use tokio::time::Instant;

use crate::chunnel::{Accepts, Chunnel, Lower, Produces, WrapContext};
use crate::datapath::{Conn, DataType, Datapath, Endpoint, Msg};
use crate::error::{Error, Result};
use crate::negotiate::Capability;

const DATA: u8 = 1;
const ACK: u8 = 2;
const DATA_HDR: usize = 9;
const MAX_SACK: usize = 64;

#[derive(Debug, Default)]
pub struct ReliabilityStats {
    pub sent: AtomicU64,
    pub retransmits: AtomicU64,
    pub delivered: AtomicU64,
    pub duplicates: AtomicU64,
    pub acks_sent: AtomicU64,
}

impl ReliabilityStats {
    pub fn retransmits(&self) -> u64 {
        self.retransmits.load(Ordering::Relaxed)
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct Reliability {
    window: usize,
    rto: Duration,
    max_retries: u32,
    stats: Arc<ReliabilityStats>,
}

impl Reliability {
    pub fn new() -> Arc<Self> {
        Self::with(32, Duration::from_millis(100), 20)
    }

    pub fn with(window: usize, rto: Duration, max_retries: u32) -> Arc<Self> {
        assert!(window > 0, "window must be positive");
        Arc::new(Reliability {
            window,
            rto,
            max_retries,
            stats: Arc::default(),
        })
    }

    /// Counters shared by every connection this chunnel built.
    pub fn stats(&self) -> Arc<ReliabilityStats> {
        self.stats.clone()
    }
}

#[async_trait]
impl Chunnel for Reliability {
    fn name(&self) -> &str {
        "reliability"
    }

    fn accepts(&self) -> Accepts {
        Accepts::Exactly(DataType::Bytes)
    }

    fn produces(&self) -> Produces {
        Produces::Exactly(DataType::Bytes)
    }

    fn capabilities(&self) -> Vec<Capability> {
        vec![Capability::exact("reliability", ["arq"])]
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> Result<Conn> {
        let Lower::Conn(inner) = lower else {
            return Err(Error::NoBootstrapLayer);
        };
        Ok(Arc::new(ReliableConn::new(inner, self)))
    }
}

struct Unacked {
    payload: Vec<u8>,
    sent_at: Instant,
    tries: u32,
}

#[derive(Default)]
struct Peer {
    next_seq: u64,
    unacked: BTreeMap<u64, Unacked>,
    failed: bool,
    // receive side
    delivered: u64,
    buffered: BTreeMap<u64, Vec<u8>>,
}

struct Shared {
    inner: Conn,
    window: usize,
    rto: Duration,
    max_retries: u32,
    peers: Mutex<BTreeMap<Endpoint, Peer>>,
    /// Wakes senders waiting for window space.
    space: Notify,
    /// Wakes the retransmit task when the earliest deadline may have moved.
    timer: Notify,
    stats: Arc<ReliabilityStats>,
}

pub struct ReliableConn {
    shared: Arc<Shared>,
    rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<Result<Msg>>>,
    tasks: [AbortHandle; 2],
}

impl Drop for ReliableConn {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

fn data_frame(seq: u64, payload: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(DATA_HDR + payload.len());
    b.push(DATA);
    b.extend_from_slice(&seq.to_be_bytes());
    b.extend_from_slice(payload);
    b
}

impl ReliableConn {
    fn new(inner: Conn, cfg: &Reliability) -> Self {
        let shared = Arc::new(Shared {
            inner: inner.clone(),
            window: cfg.window,
            rto: cfg.rto,
            max_retries: cfg.max_retries,
            peers: Mutex::new(BTreeMap::new()),
            space: Notify::new(),
            timer: Notify::new(),
            stats: cfg.stats.clone(),
        });
        let (tx, rx) = mpsc::unbounded_channel();
        let reader = tokio::spawn(read_loop(inner, Arc::downgrade(&shared), tx));
        let timer = tokio::spawn(retransmit_loop(shared.clone()));
        ReliableConn {
            shared,
            rx: tokio::sync::Mutex::new(rx),
            tasks: [reader.abort_handle(), timer.abort_handle()],
        }
    }

    /// Messages sent but not yet acknowledged, over all destinations.
    pub fn in_flight(&self) -> usize {
        self.shared
            .peers
            .lock()
            .values()
            .map(|p| p.unacked.len())
            .sum()
    }
}

#[async_trait]
impl Datapath for ReliableConn {
    fn data_type(&self) -> DataType {
        DataType::Bytes
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        let sh = &self.shared;
        let mut it = batch.into_iter().peekable();
        while it.peek().is_some() {
            let mut out = Vec::new();
            let mut wait = None;
            {
                let mut peers = sh.peers.lock();
                while let Some(m) = it.peek() {
                    let p = peers.entry(m.addr).or_default();
                    if p.failed {
                        return Err(Error::PeerUnreachable);
                    }
                    if p.unacked.len() >= sh.window {
                        wait = Some(sh.space.notified());
                        break;
                    }
                    let (addr, payload) = it.next().unwrap().into_bytes("reliability")?;
                    p.next_seq += 1;
                    let seq = p.next_seq;
                    out.push(Msg::bytes(addr, data_frame(seq, &payload)));
                    p.unacked.insert(
                        seq,
                        Unacked {
                            payload,
                            sent_at: Instant::now(),
                            tries: 0,
                        },
                    );
                }
            }
            if !out.is_empty() {
                sh.stats.sent.fetch_add(out.len() as u64, Ordering::Relaxed);
                sh.timer.notify_one();
                sh.inner.send(out).await?;
            }
            if let Some(w) = wait {
                // register before re-checking so an ack in between is not missed
                tokio::pin!(w);
                w.as_mut().enable();
                let full = {
                    let peers = sh.peers.lock();
                    let m = it.peek().expect("stopped on a message");
                    peers
                        .get(&m.addr)
                        .is_some_and(|p| p.unacked.len() >= sh.window && !p.failed)
                };
                if full {
                    w.await;
                }
            }
        }
        Ok(())
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        if slots.is_empty() {
            return Ok(0);
        }
        let mut rx = self.rx.lock().await;
        let mut buf = Vec::with_capacity(slots.len());
        if rx.recv_many(&mut buf, slots.len()).await == 0 {
            return Err(Error::ConnectionClosed);
        }
        let mut n = 0;
        for r in buf {
            let m = r?;
            slots[n] = Some(m);
            n += 1;
        }
        Ok(n)
    }
}

async fn read_loop(inner: Conn, weak: Weak<Shared>, out: mpsc::UnboundedSender<Result<Msg>>) {
    let mut slots: Vec<Option<Msg>> = (0..64).map(|_| None).collect();
    loop {
        let n = match inner.recv(&mut slots).await {
            Ok(n) => n,
            Err(e) => {
                let _ = out.send(Err(e));
                return;
            }
        };
        let Some(sh) = weak.upgrade() else { return };
        let mut acks: BTreeMap<Endpoint, ()> = BTreeMap::new();
        let mut freed = false;
        {
            let mut peers = sh.peers.lock();
            for m in slots[..n].iter_mut().filter_map(Option::take) {
                let Ok((from, b)) = m.into_bytes("reliability") else {
                    continue;
                };
                match b.first() {
                    Some(&DATA) if b.len() >= DATA_HDR => {
                        let seq = u64::from_be_bytes(b[1..DATA_HDR].try_into().unwrap());
                        let p = peers.entry(from).or_default();
                        acks.insert(from, ());
                        if seq <= p.delivered || p.buffered.contains_key(&seq) {
                            sh.stats.duplicates.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                        p.buffered.insert(seq, b[DATA_HDR..].to_vec());
                        while let Some(payload) = p.buffered.remove(&(p.delivered + 1)) {
                            p.delivered += 1;
                            sh.stats.delivered.fetch_add(1, Ordering::Relaxed);
                            let _ = out.send(Ok(Msg::bytes(from, payload)));
                        }
                    }
                    Some(&ACK) => {
                        let Some((cum, sacks)) = parse_ack(&b) else {
                            continue;
                        };
                        if let Some(p) = peers.get_mut(&from) {
                            let before = p.unacked.len();
                            p.unacked = p.unacked.split_off(&(cum + 1));
                            for s in sacks {
                                p.unacked.remove(&s);
                            }
                            freed |= p.unacked.len() < before;
                        }
                    }
                    _ => tracing::debug!(%from, "dropping malformed reliability frame"),
                }
            }
        }
        if freed {
            sh.space.notify_waiters();
        }
        if !acks.is_empty() {
            let frames: Vec<Msg> = {
                let peers = sh.peers.lock();
                acks.keys()
                    .map(|a| Msg::bytes(*a, ack_frame(&peers[a])))
                    .collect()
            };
            sh.stats
                .acks_sent
                .fetch_add(frames.len() as u64, Ordering::Relaxed);
            if let Err(e) = sh.inner.send(frames).await {
                tracing::debug!("ack send failed: {e}");
            }
        }
    }
}

fn ack_frame(p: &Peer) -> Vec<u8> {
    let sacks: Vec<u64> = p.buffered.keys().take(MAX_SACK).copied().collect();
    let mut b = Vec::with_capacity(11 + 8 * sacks.len());
    b.push(ACK);
    b.extend_from_slice(&p.delivered.to_be_bytes());
    b.extend_from_slice(&(sacks.len() as u16).to_be_bytes());
    for s in sacks {
        b.extend_from_slice(&s.to_be_bytes());
    }
    b
}

fn parse_ack(b: &[u8]) -> Option<(u64, BTreeSet<u64>)> {
    if b.len() < 11 {
        return None;
    }
    let cum = u64::from_be_bytes(b[1..9].try_into().unwrap());
    let n = u16::from_be_bytes([b[9], b[10]]) as usize;
    if b.len() != 11 + 8 * n {
        return None;
    }
    let sacks = (0..n)
        .map(|i| u64::from_be_bytes(b[11 + 8 * i..19 + 8 * i].try_into().unwrap()))
        .collect();
    Some((cum, sacks))
}

async fn retransmit_loop(sh: Arc<Shared>) {
    loop {
        let notified = sh.timer.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let now = Instant::now();
        let mut resend = Vec::new();
        let mut next: Option<Instant> = None;
        let mut failed = false;
        {
            let mut peers = sh.peers.lock();
            for (addr, p) in peers.iter_mut() {
                for (seq, u) in p.unacked.iter_mut() {
                    let due = u.sent_at + sh.rto;
                    let due = if due <= now {
                        if u.tries >= sh.max_retries {
                            p.failed = true;
                            break;
                        }
                        u.tries += 1;
                        u.sent_at = now;
                        resend.push(Msg::bytes(*addr, data_frame(*seq, &u.payload)));
                        now + sh.rto
                    } else {
                        due
                    };
                    next = Some(next.map_or(due, |n| n.min(due)));
                }
                if p.failed && !p.unacked.is_empty() {
                    tracing::warn!(peer = %addr, "giving up after {} retries", sh.max_retries);
                    p.unacked.clear();
                    failed = true;
                }
            }
        }
        if failed {
            sh.space.notify_waiters();
        }
        if !resend.is_empty() {
            sh.stats
                .retransmits
                .fetch_add(resend.len() as u64, Ordering::Relaxed);
            if let Err(e) = sh.inner.send(resend).await {
                tracing::debug!("retransmit failed: {e}");
            }
        }
        match next {
            Some(at) => {
                tokio::select! {
                    biased;
                    _ = &mut notified => {}
                    _ = tokio::time::sleep_until(at) => {}
                }
            }
            None => notified.await,
        }
    }
}
