//! Point-to-point negotiation and the connection object it produces.
//!
//! ```text
//! HELLO      := offer
//! ACCEPT     := client_index:u16 nonce_len:u16 nonce stack
//! ZRTT_FAIL  := same as ACCEPT
//! ZRTT_HELLO := nonce_len:u16 nonce stack offer
//! REJECT     := code:u8 reason:str
//! ```
//!
//! `stack` is one candidate's capability list. The nonce in ACCEPT carries the
//! server's branch choice and the fingerprint of `[client stack, server stack]`.

use std::collections::BTreeMap;
use std::sync::{Arc, Weak};
use std::time::Duration;

use arc_swap::ArcSwap;
use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::{mpsc, watch};
use tokio::task::AbortHandle;

use super::capability::Capability;
use super::compat::{check_compat, stacks_compatible};
use super::nonce::{decode_nonce, encode_nonce, fingerprint, Fingerprint, Nonce};
use crate::chunnel::{Lower, WrapContext};
use crate::datapath::{Conn, DataType, Datapath, Endpoint, Msg};
use crate::error::{Error, Result};
use crate::proto::mux::{ControlChannel, Mux};
use crate::proto::offer::{encode_entries, read_entries, OfferPayload};
use crate::proto::wire::{put_str, put_u16, put_u64, Reader};
use crate::proto::Tag;
use crate::reconfig::twopc::{Bus, Hooks, TwoPcConfig, TwoPcMsg, TwoPcNode};
use crate::reconfig::ReconfigHandle;
use crate::stack::{CandidateStack, StackSpec};

const REJECT_INCOMPATIBLE: u8 = 1;
const REJECT_MALFORMED: u8 = 2;
const REJECT_INIT: u8 = 3;

/// How long a client waits for the server's answer after its HELLO was acknowledged.
pub const DEFAULT_REPLY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// The outcome of negotiation for one epoch of a connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegotiatedStack {
    pub epoch: u64,
    pub choice: CandidateStack,
    pub local_caps: Vec<Capability>,
    pub peer_caps: Vec<Capability>,
    pub fingerprint: Fingerprint,
}

impl NegotiatedStack {
    fn new(
        role: Role,
        epoch: u64,
        choice: CandidateStack,
        local: Vec<Capability>,
        peer: Vec<Capability>,
    ) -> Self {
        let fp = match role {
            Role::Client => fingerprint(&[&local, &peer]),
            Role::Server => fingerprint(&[&peer, &local]),
        };
        NegotiatedStack {
            epoch,
            choice,
            local_caps: local,
            peer_caps: peer,
            fingerprint: fp,
        }
    }

    pub fn nonce(&self) -> Vec<u8> {
        encode_nonce(&self.choice, &self.fingerprint)
    }
}

#[derive(Debug, Clone)]
struct Cached {
    choice: CandidateStack,
    local_caps: Vec<Capability>,
    peer_caps: Vec<Capability>,
}

/// Client-side memory of the last successful negotiation per server, used to
/// skip the handshake round trip.
#[derive(Debug, Default)]
pub struct ZeroRttCache {
    entries: Mutex<BTreeMap<Endpoint, Cached>>,
}

impl ZeroRttCache {
    pub fn new() -> Arc<Self> {
        Arc::new(ZeroRttCache::default())
    }

    pub fn contains(&self, server: Endpoint) -> bool {
        self.entries.lock().contains_key(&server)
    }

    pub fn remove(&self, server: Endpoint) {
        self.entries.lock().remove(&server);
    }

    fn put(&self, server: Endpoint, n: &NegotiatedStack) {
        self.entries.lock().insert(
            server,
            Cached {
                choice: n.choice.clone(),
                local_caps: n.local_caps.clone(),
                peer_caps: n.peer_caps.clone(),
            },
        );
    }

    fn get(&self, server: Endpoint) -> Option<Cached> {
        self.entries.lock().get(&server).cloned()
    }
}

fn put_nonce(out: &mut Vec<u8>, nonce: &[u8]) {
    put_u16(out, nonce.len() as u16);
    out.extend_from_slice(nonce);
}

fn read_nonce(r: &mut Reader<'_>) -> Result<Nonce> {
    let n = r.u16()? as usize;
    decode_nonce(r.take(n)?)
}

fn encode_accept(client_index: usize, nonce: &[u8], caps: &[Capability]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u16(&mut out, client_index as u16);
    put_nonce(&mut out, nonce);
    encode_entries(caps, &mut out);
    out
}

fn decode_accept(buf: &[u8]) -> Result<(usize, Nonce, Vec<Capability>)> {
    let mut r = Reader::new(buf, Error::MalformedFrame);
    let idx = r.u16()? as usize;
    let nonce = read_nonce(&mut r)?;
    let caps = read_entries(&mut r)?;
    r.finish()?;
    Ok((idx, nonce, caps))
}

fn encode_reject(code: u8, reason: &str) -> Vec<u8> {
    let mut out = vec![code];
    put_str(&mut out, reason);
    out
}

fn reject_error(buf: &[u8]) -> Error {
    let mut r = Reader::new(buf, Error::MalformedFrame);
    let parsed = r.u8().and_then(|c| Ok((c, r.str()?.to_string())));
    match parsed {
        Ok((REJECT_INCOMPATIBLE, _)) => Error::NoCompatibleStack,
        Ok((_, reason)) => Error::NegotiationRejected(reason),
        Err(e) => Error::NegotiationRejected(format!("unreadable reject: {e}")),
    }
}

fn encode_zrtt_hello(nonce: &[u8], caps: &[Capability], offer: &OfferPayload) -> Vec<u8> {
    let mut out = Vec::new();
    put_nonce(&mut out, nonce);
    encode_entries(caps, &mut out);
    offer.encode_into(&mut out);
    out
}

fn decode_zrtt_hello(buf: &[u8]) -> Result<(Nonce, Vec<Capability>, OfferPayload)> {
    let mut r = Reader::new(buf, Error::MalformedOffer);
    let nonce = read_nonce(&mut r)?;
    let caps = read_entries(&mut r)?;
    let offer = OfferPayload::read(&mut r)?;
    r.finish()?;
    Ok((nonce, caps, offer))
}

/// Negotiation settings shared by the client and server sides.
#[derive(Clone)]
pub struct Negotiator {
    mux: Mux,
    spec: StackSpec,
    twopc: TwoPcConfig,
    reply_timeout: Duration,
    cache: Option<Arc<ZeroRttCache>>,
}

impl Negotiator {
    pub fn new(mux: Mux, spec: StackSpec) -> Self {
        Negotiator {
            mux,
            spec,
            twopc: TwoPcConfig::default(),
            reply_timeout: DEFAULT_REPLY_TIMEOUT,
            cache: None,
        }
    }

    pub fn twopc(mut self, cfg: TwoPcConfig) -> Self {
        self.twopc = cfg;
        self
    }

    pub fn reply_timeout(mut self, d: Duration) -> Self {
        self.reply_timeout = d;
        self
    }

    /// Reuse and record negotiated stacks in `cache`.
    pub fn zero_rtt(mut self, cache: Arc<ZeroRttCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn spec(&self) -> &StackSpec {
        &self.spec
    }

    pub fn mux(&self) -> &Mux {
        &self.mux
    }

    fn fresh_conn_id() -> u64 {
        loop {
            let id: u64 = rand::random();
            if id != 0 {
                return id;
            }
        }
    }

    /// Connect to `server`. With a zero-RTT cache entry the returned
    /// connection can send at once and [`Connection::confirmed`] reports the
    /// server's answer; otherwise this performs the full handshake.
    pub async fn connect(&self, server: Endpoint) -> Result<Connection> {
        if let Some(cached) = self.cache.as_ref().and_then(|c| c.get(server)) {
            let still_ours = self
                .spec
                .capabilities(&cached.choice)
                .is_ok_and(|caps| caps == cached.local_caps);
            if still_ours {
                return self.connect_0rtt(server, cached).await;
            }
        }
        self.connect_full(server).await
    }

    async fn connect_full(&self, server: Endpoint) -> Result<Connection> {
        let offer = self.spec.offer();
        let conn_id = Self::fresh_conn_id();
        let ch = self.mux.channel(server, conn_id);
        let payload = OfferPayload::new(offer.iter().map(|(_, c)| c.clone()).collect()).encode();
        let res = async {
            ch.send(Tag::Hello, payload).await?;
            let (tag, body) = tokio::time::timeout(self.reply_timeout, ch.recv())
                .await
                .map_err(|_| Error::PeerUnreachable)??;
            match tag {
                Tag::Accept => {
                    let n = client_accept(&offer, &body)?;
                    Connection::establish(self, ch.clone(), Role::Client, n, None).await
                }
                Tag::Reject => Err(reject_error(&body)),
                t => Err(Error::MalformedFrame(format!(
                    "unexpected {t:?} during handshake"
                ))),
            }
        }
        .await;
        match &res {
            Ok(c) => {
                if let Some(cache) = &self.cache {
                    cache.put(server, &c.negotiated());
                }
            }
            Err(_) => self.mux.forget_channel(server, conn_id),
        }
        res
    }

    async fn connect_0rtt(&self, server: Endpoint, cached: Cached) -> Result<Connection> {
        let conn_id = Self::fresh_conn_id();
        let ch = self.mux.channel(server, conn_id);
        let n = NegotiatedStack::new(
            Role::Client,
            1,
            cached.choice,
            cached.local_caps,
            cached.peer_caps,
        );
        let offer = OfferPayload::new(self.spec.offer().into_iter().map(|(_, c)| c).collect());
        let hello = encode_zrtt_hello(&n.nonce(), &n.local_caps, &offer);
        let conn =
            Connection::establish(self, ch.clone(), Role::Client, n, Some(self.cache.clone()))
                .await?;
        let weak = Arc::downgrade(&conn.inner);
        let task = tokio::spawn(async move {
            if let Err(e) = ch.send(Tag::ZrttHello, hello).await {
                if let Some(inner) = weak.upgrade() {
                    inner.fail_confirmation(e);
                }
            }
        });
        conn.inner.tasks.lock().push(task.abort_handle());
        // let the hello reach the wire before the caller's first send
        tokio::task::yield_now().await;
        Ok(conn)
    }

    /// Start answering handshakes on this negotiator's mux.
    pub fn listen(&self) -> Listener {
        let (tx, rx) = mpsc::unbounded_channel();
        let me = self.clone();
        let task = tokio::spawn(async move {
            loop {
                let ch = match me.mux.accept().await {
                    Ok(ch) => ch,
                    Err(_) => return,
                };
                let me = me.clone();
                let tx = tx.clone();
                tokio::spawn(async move {
                    match me.serve_handshake(ch.clone()).await {
                        Ok(Some(c)) => {
                            let _ = tx.send(c);
                        }
                        Ok(None) => {}
                        Err(e) => {
                            tracing::debug!(peer = %ch.peer(), "handshake failed: {e}");
                        }
                    }
                });
            }
        });
        Listener {
            rx: tokio::sync::Mutex::new(rx),
            task: task.abort_handle(),
        }
    }

    async fn serve_handshake(&self, ch: ControlChannel) -> Result<Option<Connection>> {
        let (tag, body) = ch.recv().await?;
        let local = self.spec.offer();
        let local_caps: Vec<Vec<Capability>> = local.iter().map(|(_, c)| c.clone()).collect();
        let reject = |code: u8, reason: String| {
            let ch = ch.clone();
            async move {
                tracing::debug!(peer = %ch.peer(), "rejecting: {reason}");
                let r = ch.send(Tag::Reject, encode_reject(code, &reason)).await;
                let (mux, peer, id) = (ch.mux().clone(), ch.peer(), ch.conn_id());
                // keep answering retransmissions for a while
                tokio::spawn(async move {
                    tokio::time::sleep(Duration::from_secs(30)).await;
                    mux.forget_channel(peer, id);
                });
                r.map(|_| None)
            }
        };
        match tag {
            Tag::Hello => {
                let offer = match OfferPayload::decode(&body) {
                    Ok(o) => o,
                    Err(e) => {
                        return reject(REJECT_MALFORMED, format!("MalformedOffer: {e}")).await
                    }
                };
                let pick = match check_compat(&offer.candidates, &local_caps) {
                    Ok(p) => p,
                    Err(_) => {
                        return reject(REJECT_INCOMPATIBLE, "no compatible stack".into()).await
                    }
                };
                let (choice, caps) = local[pick.server].clone();
                let n = NegotiatedStack::new(
                    Role::Server,
                    1,
                    choice,
                    caps,
                    offer.candidates[pick.client].clone(),
                );
                let accept = encode_accept(pick.client, &n.nonce(), &n.local_caps);
                let conn =
                    match Connection::establish(self, ch.clone(), Role::Server, n, None).await {
                        Ok(c) => c,
                        Err(e) => return reject(REJECT_INIT, e.to_string()).await,
                    };
                ch.send(Tag::Accept, accept).await?;
                Ok(Some(conn))
            }
            Tag::ZrttHello => {
                let (nonce, client_caps, offer) = match decode_zrtt_hello(&body) {
                    Ok(x) => x,
                    Err(e) => {
                        return reject(REJECT_MALFORMED, format!("MalformedOffer: {e}")).await
                    }
                };
                let client_index = offer.candidates.iter().position(|c| *c == client_caps);
                let reuse = client_index.and_then(|ci| {
                    local.iter().find_map(|(choice, caps)| {
                        let fp = fingerprint(&[&client_caps, caps]);
                        (fp == nonce.fingerprint && stacks_compatible(&client_caps, caps).is_some())
                            .then(|| (ci, choice.clone(), caps.clone()))
                    })
                });
                if let Some((ci, choice, caps)) = reuse {
                    let n = NegotiatedStack::new(Role::Server, 1, choice, caps, client_caps);
                    let accept = encode_accept(ci, &n.nonce(), &n.local_caps);
                    let conn = match Connection::establish(self, ch.clone(), Role::Server, n, None)
                        .await
                    {
                        Ok(c) => c,
                        Err(e) => return reject(REJECT_INIT, e.to_string()).await,
                    };
                    ch.send(Tag::Accept, accept).await?;
                    return Ok(Some(conn));
                }
                let pick = match check_compat(&offer.candidates, &local_caps) {
                    Ok(p) => p,
                    Err(_) => {
                        return reject(REJECT_INCOMPATIBLE, "no compatible stack".into()).await
                    }
                };
                let (choice, caps) = local[pick.server].clone();
                let n = NegotiatedStack::new(
                    Role::Server,
                    2,
                    choice,
                    caps,
                    offer.candidates[pick.client].clone(),
                );
                // data sent under the stale guess is dropped
                ch.mux().close_data(ch.conn_id(), 1);
                let fail = encode_accept(pick.client, &n.nonce(), &n.local_caps);
                let conn =
                    match Connection::establish(self, ch.clone(), Role::Server, n, None).await {
                        Ok(c) => c,
                        Err(e) => return reject(REJECT_INIT, e.to_string()).await,
                    };
                ch.send(Tag::ZrttFail, fail).await?;
                Ok(Some(conn))
            }
            t => {
                tracing::debug!(peer = %ch.peer(), "ignoring {t:?} on a fresh channel");
                ch.mux().forget_channel(ch.peer(), ch.conn_id());
                Ok(None)
            }
        }
    }
}

/// Interpret an ACCEPT (or ZRTT_FAIL) against our own offer.
fn client_accept(
    offer: &[(CandidateStack, Vec<Capability>)],
    body: &[u8],
) -> Result<NegotiatedStack> {
    let (idx, nonce, server_caps) = decode_accept(body)?;
    let (choice, caps) = offer.get(idx).ok_or_else(|| {
        Error::MalformedFrame(format!("server picked candidate {idx} of {}", offer.len()))
    })?;
    let n = NegotiatedStack::new(Role::Client, 1, choice.clone(), caps.clone(), server_caps);
    if n.fingerprint != nonce.fingerprint {
        return Err(Error::MalformedNonce(
            "fingerprint does not match the agreed stacks".into(),
        ));
    }
    if stacks_compatible(&n.local_caps, &n.peer_caps).is_none() {
        return Err(Error::NoCompatibleStack);
    }
    Ok(n)
}

pub async fn client_negotiate(mux: &Mux, spec: &StackSpec, server: Endpoint) -> Result<Connection> {
    Negotiator::new(mux.clone(), spec.clone())
        .connect(server)
        .await
}

pub fn server_negotiate(mux: &Mux, spec: &StackSpec) -> Listener {
    Negotiator::new(mux.clone(), spec.clone()).listen()
}

/// Connections accepted by a server.
pub struct Listener {
    rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<Connection>>,
    task: AbortHandle,
}

impl Listener {
    pub async fn accept(&self) -> Result<Connection> {
        self.rx
            .lock()
            .await
            .recv()
            .await
            .ok_or(Error::ConnectionClosed)
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.task.abort();
    }
}

struct Epoch {
    negotiated: NegotiatedStack,
    conn: Conn,
    handle: ReconfigHandle,
    pump: AbortHandle,
}

impl Drop for Epoch {
    fn drop(&mut self) {
        self.pump.abort();
    }
}

#[derive(Debug, Clone)]
enum Confirm {
    Pending,
    Done,
    Failed(String, bool),
}

struct ConnInner {
    role: Role,
    spec: StackSpec,
    ctrl: ControlChannel,
    current: ArcSwap<Epoch>,
    previous: Mutex<Option<Arc<Epoch>>>,
    out_tx: mpsc::UnboundedSender<(u64, Result<Msg>)>,
    out_rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<(u64, Result<Msg>)>>,
    confirm: watch::Sender<Confirm>,
    /// Set while a zero-RTT connection waits for the server's answer.
    zrtt_cache: Mutex<Option<Option<Arc<ZeroRttCache>>>>,
    twopc: Mutex<Option<Arc<TwoPcNode<NegotiatedStack>>>>,
    tasks: Mutex<Vec<AbortHandle>>,
    busy: tokio::sync::Mutex<()>,
}

impl Drop for ConnInner {
    fn drop(&mut self) {
        for t in self.tasks.get_mut().drain(..) {
            t.abort();
        }
    }
}

/// A negotiated connection. Cloning shares the connection.
#[derive(Clone)]
pub struct Connection {
    inner: Arc<ConnInner>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("role", &self.inner.role)
            .field("peer", &self.peer())
            .field("conn_id", &self.conn_id())
            .field("epoch", &self.epoch())
            .finish()
    }
}

impl Connection {
    async fn establish(
        neg: &Negotiator,
        ctrl: ControlChannel,
        role: Role,
        n: NegotiatedStack,
        zrtt: Option<Option<Arc<ZeroRttCache>>>,
    ) -> Result<Connection> {
        let (out_tx, out_rx) = mpsc::unbounded_channel();
        let pending = zrtt.is_some();
        let first = build_epoch(&neg.spec, &ctrl, n, out_tx.clone()).await?;
        let inner = Arc::new(ConnInner {
            role,
            spec: neg.spec.clone(),
            ctrl: ctrl.clone(),
            current: ArcSwap::from(Arc::new(first)),
            previous: Mutex::new(None),
            out_tx,
            out_rx: tokio::sync::Mutex::new(out_rx),
            confirm: watch::channel(if pending {
                Confirm::Pending
            } else {
                Confirm::Done
            })
            .0,
            zrtt_cache: Mutex::new(zrtt),
            twopc: Mutex::new(None),
            tasks: Mutex::new(Vec::new()),
            busy: tokio::sync::Mutex::new(()),
        });
        let bus = Arc::new(ConnBus {
            ctrl: ctrl.clone(),
            retry: neg.twopc.retry,
        });
        let hooks = Arc::new(ConnHooks {
            inner: Arc::downgrade(&inner),
        });
        let me = ctrl.mux().local().unwrap_or(Endpoint::sim(0, 0));
        *inner.twopc.lock() = Some(TwoPcNode::new(me, bus, hooks, neg.twopc));
        let task = tokio::spawn(control_loop(Arc::downgrade(&inner), ctrl));
        inner.tasks.lock().push(task.abort_handle());
        Ok(Connection { inner })
    }

    pub fn role(&self) -> Role {
        self.inner.role
    }

    pub fn peer(&self) -> Endpoint {
        self.inner.ctrl.peer()
    }

    pub fn conn_id(&self) -> u64 {
        self.inner.ctrl.conn_id()
    }

    pub fn epoch(&self) -> u64 {
        self.inner.current.load().negotiated.epoch
    }

    pub fn negotiated(&self) -> NegotiatedStack {
        self.inner.current.load().negotiated.clone()
    }

    pub fn nonce(&self) -> Vec<u8> {
        self.inner.current.load().negotiated.nonce()
    }

    /// Handle for unilateral swaps of the current epoch's stack.
    pub fn handle(&self) -> ReconfigHandle {
        self.inner.current.load().handle.clone()
    }

    pub fn spec(&self) -> &StackSpec {
        &self.inner.spec
    }

    /// Hand this server-side connection to `backend` under the same
    /// connection id, so traffic for it can go straight to the backend.
    /// The backend accepts it like a zero-RTT hello carrying our nonce.
    pub async fn forward_to(&self, backend: Endpoint) -> Result<()> {
        let n = self.negotiated();
        if self.role() != Role::Server || n.epoch != 1 {
            return Err(Error::InvalidCandidate(
                "only a first-epoch server connection can be forwarded".into(),
            ));
        }
        let mux = self.inner.ctrl.mux().clone();
        let ch = mux.channel(backend, self.conn_id());
        let offer = OfferPayload::new(vec![n.peer_caps.clone()]);
        let hello = encode_zrtt_hello(&n.nonce(), &n.peer_caps, &offer);
        let res = async {
            ch.send(Tag::ZrttHello, hello).await?;
            let (tag, body) = tokio::time::timeout(DEFAULT_REPLY_TIMEOUT, ch.recv())
                .await
                .map_err(|_| Error::PeerUnreachable)??;
            match tag {
                Tag::Accept => Ok(()),
                Tag::Reject => Err(reject_error(&body)),
                // the backend would run a different stack than ours
                Tag::ZrttFail => Err(Error::NoCompatibleStack),
                t => Err(Error::MalformedFrame(format!(
                    "unexpected {t:?} while forwarding"
                ))),
            }
        }
        .await;
        mux.forget_channel(backend, self.conn_id());
        res
    }

    /// As a shareable datapath.
    pub fn datapath(&self) -> Conn {
        Arc::new(self.clone())
    }

    /// Wait until the server confirmed a zero-RTT connection. Immediate for
    /// connections set up by a full handshake.
    pub async fn confirmed(&self) -> Result<()> {
        let mut rx = self.inner.confirm.subscribe();
        let state = rx.wait_for(|c| !matches!(c, Confirm::Pending)).await;
        match state.map(|s| s.clone()) {
            Ok(Confirm::Failed(_, true)) => Err(Error::NoCompatibleStack),
            Ok(Confirm::Failed(r, false)) => Err(Error::NegotiationRejected(r)),
            Ok(_) => Ok(()),
            Err(_) => Err(Error::ConnectionClosed),
        }
    }

    /// Completed 2PC decisions, by proposal id.
    pub fn decisions(&self) -> BTreeMap<u64, crate::reconfig::twopc::Decision> {
        self.inner.node().decisions()
    }

    /// Move to `target`. If its capabilities equal the current ones the swap
    /// is local; otherwise both endpoints agree through two-phase commit and
    /// a new epoch is built.
    pub async fn reconfigure(&self, target: &CandidateStack) -> Result<()> {
        let inner = &self.inner;
        let _g = inner.busy.lock().await;
        let caps = inner.spec.capabilities(target)?;
        let cur = inner.current.load_full();
        if caps == cur.negotiated.local_caps {
            return cur.handle.reconfigure(target).await;
        }
        let next = cur.negotiated.epoch + 1;
        let mut prepare = Vec::new();
        put_u64(&mut prepare, next);
        encode_entries(&caps, &mut prepare);
        let node = inner.node();
        let strong = inner.clone();
        let target = target.clone();
        let peer = self.peer();
        node.propose(&[peer], prepare, move |votes| {
            Box::pin(async move {
                let (_, info) = votes
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Aborted("no vote".into()))?;
                let peer_caps = crate::proto::decode_stack(&info)?;
                let n = NegotiatedStack::new(strong.role, next, target, caps, peer_caps);
                strong.install(n).await
            })
        })
        .await
    }
}

impl ConnInner {
    fn node(&self) -> Arc<TwoPcNode<NegotiatedStack>> {
        self.twopc
            .lock()
            .clone()
            .expect("2PC node set at establishment")
    }

    async fn install(&self, n: NegotiatedStack) -> Result<()> {
        let e = build_epoch(&self.spec, &self.ctrl, n, self.out_tx.clone()).await?;
        let old = self.current.swap(Arc::new(e));
        tracing::debug!(
            epoch = self.current.load().negotiated.epoch,
            "switched epoch"
        );
        *self.previous.lock() = Some(old);
        Ok(())
    }

    /// Replace the current epoch outright, dropping the stale one.
    async fn replace(&self, n: NegotiatedStack) -> Result<()> {
        let stale = self.current.load().negotiated.epoch;
        let e = build_epoch(&self.spec, &self.ctrl, n, self.out_tx.clone()).await?;
        self.current.store(Arc::new(e));
        self.ctrl.mux().close_data(self.ctrl.conn_id(), stale);
        Ok(())
    }

    fn fail_confirmation(&self, e: Error) {
        let incompatible = matches!(e, Error::NoCompatibleStack);
        if let Some(Some(cache)) = self.zrtt_cache.lock().take() {
            cache.remove(self.ctrl.peer());
        }
        self.confirm
            .send_replace(Confirm::Failed(e.to_string(), incompatible));
    }
}

async fn build_epoch(
    spec: &StackSpec,
    ctrl: &ControlChannel,
    n: NegotiatedStack,
    out: mpsc::UnboundedSender<(u64, Result<Msg>)>,
) -> Result<Epoch> {
    let session = ctrl.mux().open_data(ctrl.conn_id(), n.epoch, ctrl.peer());
    let cx = WrapContext {
        epoch: n.epoch,
        nonce: Some(n.nonce()),
    };
    let inst = spec
        .instantiate(&n.choice, Lower::Conn(session), &cx)
        .await?;
    let conn = inst.conn.clone();
    let epoch = n.epoch;
    let pump = tokio::spawn(async move {
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
    });
    Ok(Epoch {
        negotiated: n,
        conn: inst.conn,
        handle: inst.handle,
        pump: pump.abort_handle(),
    })
}

async fn control_loop(weak: Weak<ConnInner>, ctrl: ControlChannel) {
    loop {
        let Ok((tag, body)) = ctrl.recv().await else {
            return;
        };
        let Some(inner) = weak.upgrade() else { return };
        match tag {
            Tag::Prepare | Tag::Vote | Tag::Commit | Tag::Abort => {
                match TwoPcMsg::decode(tag, &body) {
                    Ok(m) => {
                        let node = inner.node();
                        let from = ctrl.peer();
                        tokio::spawn(async move { node.handle(from, m).await });
                    }
                    Err(e) => tracing::debug!("bad 2PC frame: {e}"),
                }
            }
            Tag::Accept | Tag::ZrttFail | Tag::Reject => {
                let Some(cache) = inner.zrtt_cache.lock().take() else {
                    tracing::debug!("ignoring late {tag:?}");
                    continue;
                };
                let offer = inner.spec.offer();
                let outcome = match tag {
                    Tag::Reject => Err(reject_error(&body)),
                    _ => client_accept(&offer, &body),
                };
                match (tag, outcome) {
                    (_, Err(e)) => {
                        *inner.zrtt_cache.lock() = Some(cache);
                        inner.fail_confirmation(e);
                    }
                    (Tag::Accept, Ok(n)) => {
                        if n.fingerprint != inner.current.load().negotiated.fingerprint {
                            *inner.zrtt_cache.lock() = Some(cache);
                            inner.fail_confirmation(Error::MalformedNonce(
                                "server confirmed a different stack".into(),
                            ));
                            continue;
                        }
                        if let Some(c) = &cache {
                            c.put(ctrl.peer(), &n);
                        }
                        inner.confirm.send_replace(Confirm::Done);
                    }
                    (_, Ok(mut n)) => {
                        n.epoch = 2;
                        match inner.replace(n.clone()).await {
                            Ok(()) => {
                                if let Some(c) = &cache {
                                    c.put(ctrl.peer(), &n);
                                }
                                inner.confirm.send_replace(Confirm::Done);
                            }
                            Err(e) => {
                                *inner.zrtt_cache.lock() = Some(cache);
                                inner.fail_confirmation(e);
                            }
                        }
                    }
                }
            }
            t => tracing::debug!("unexpected {t:?} on an established connection"),
        }
    }
}

struct ConnBus {
    ctrl: ControlChannel,
    retry: crate::proto::ReliableConfig,
}

#[async_trait]
impl Bus for ConnBus {
    async fn send(&self, _to: Endpoint, msg: TwoPcMsg) -> Result<()> {
        self.ctrl
            .send_with(msg.tag(), msg.payload(), self.retry)
            .await
    }
}

struct ConnHooks {
    inner: Weak<ConnInner>,
}

#[async_trait]
impl Hooks<NegotiatedStack> for ConnHooks {
    fn check(&self, _from: Endpoint, target: &[u8]) -> Option<(Vec<u8>, NegotiatedStack)> {
        let inner = self.inner.upgrade()?;
        let mut r = Reader::new(target, Error::MalformedFrame);
        let epoch = r.u64().ok()?;
        let peer_caps = read_entries(&mut r).ok()?;
        r.finish().ok()?;
        if epoch != inner.current.load().negotiated.epoch + 1 {
            return None;
        }
        let (choice, caps) = inner
            .spec
            .offer()
            .into_iter()
            .find(|(_, caps)| stacks_compatible(caps, &peer_caps).is_some())?;
        let info = crate::proto::encode_stack(&caps);
        Some((
            info,
            NegotiatedStack::new(inner.role, epoch, choice, caps, peer_caps),
        ))
    }

    async fn commit(&self, pid: u64, n: NegotiatedStack) {
        let Some(inner) = self.inner.upgrade() else {
            return;
        };
        let epoch = n.epoch;
        if let Err(e) = inner.install(n).await {
            tracing::error!(pid, epoch, "committed stack failed to build: {e}");
        }
    }
}

#[async_trait]
impl Datapath for Connection {
    fn data_type(&self) -> DataType {
        self.inner.spec.output_type()
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        if let Confirm::Failed(..) = &*self.inner.confirm.borrow() {
            return Err(Error::ConnectionClosed);
        }
        let cur = self.inner.current.load_full();
        cur.conn.send(batch).await
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        if slots.is_empty() {
            return Ok(0);
        }
        let mut rx = self.inner.out_rx.lock().await;
        let mut n = 0;
        loop {
            let item = if n == 0 {
                rx.recv().await
            } else {
                match rx.try_recv() {
                    Ok(x) => Some(x),
                    Err(_) => return Ok(n),
                }
            };
            let Some((epoch, r)) = item else {
                return if n > 0 {
                    Ok(n)
                } else {
                    Err(Error::ConnectionClosed)
                };
            };
            match r {
                Ok(m) => {
                    slots[n] = Some(m);
                    n += 1;
                    if n == slots.len() {
                        return Ok(n);
                    }
                }
                Err(e) if epoch == self.epoch() => {
                    if n > 0 {
                        tracing::debug!("dropping error after partial batch: {e}");
                        return Ok(n);
                    }
                    return Err(e);
                }
                Err(e) => tracing::debug!(epoch, "retired epoch ended: {e}"),
            }
        }
    }
}
