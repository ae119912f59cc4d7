//! Two-phase commit for multilateral reconfiguration.
//!
//! The proposer is the coordinator. It sends PREPARE(pid, target) to every
//! peer, collects votes until all say yes, any says no or the vote timeout
//! fires, then runs its commit point and broadcasts COMMIT, or broadcasts
//! ABORT. A participant votes yes at most for one proposal at a time and, once
//! prepared, waits for the decision; if none arrives within the decision
//! timeout it aborts on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::mpsc;

use crate::datapath::Endpoint;
use crate::error::{Error, Result};
use crate::proto::mux::{ControlChannel, Mux, ReliableConfig};
use crate::proto::wire::{put_u64, Reader};
use crate::proto::Tag;
use crate::stack::futures_lite::BoxFuture;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TwoPcMsg {
    Prepare { pid: u64, target: Vec<u8> },
    Vote { pid: u64, yes: bool, info: Vec<u8> },
    Commit { pid: u64 },
    Abort { pid: u64 },
}

impl TwoPcMsg {
    pub fn pid(&self) -> u64 {
        match self {
            TwoPcMsg::Prepare { pid, .. }
            | TwoPcMsg::Vote { pid, .. }
            | TwoPcMsg::Commit { pid }
            | TwoPcMsg::Abort { pid } => *pid,
        }
    }

    pub fn tag(&self) -> Tag {
        match self {
            TwoPcMsg::Prepare { .. } => Tag::Prepare,
            TwoPcMsg::Vote { .. } => Tag::Vote,
            TwoPcMsg::Commit { .. } => Tag::Commit,
            TwoPcMsg::Abort { .. } => Tag::Abort,
        }
    }

    /// Payload: `pid:u64` followed by the target stack (PREPARE) or the vote
    /// byte and the voter's chosen stack (VOTE).
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u64(&mut out, self.pid());
        match self {
            TwoPcMsg::Prepare { target, .. } => out.extend_from_slice(target),
            TwoPcMsg::Vote { yes, info, .. } => {
                out.push(*yes as u8);
                out.extend_from_slice(info);
            }
            _ => {}
        }
        out
    }

    pub fn decode(tag: Tag, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload, Error::MalformedFrame);
        let pid = r.u64()?;
        let rest = |r: &mut Reader<'_>| r.take(r.remaining()).map(<[u8]>::to_vec);
        Ok(match tag {
            Tag::Prepare => TwoPcMsg::Prepare {
                pid,
                target: rest(&mut r)?,
            },
            Tag::Vote => {
                let yes = match r.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(Error::MalformedFrame(format!("vote byte {b}"))),
                };
                TwoPcMsg::Vote {
                    pid,
                    yes,
                    info: rest(&mut r)?,
                }
            }
            Tag::Commit => {
                r.finish()?;
                TwoPcMsg::Commit { pid }
            }
            Tag::Abort => {
                r.finish()?;
                TwoPcMsg::Abort { pid }
            }
            t => return Err(Error::MalformedFrame(format!("{t:?} is not a 2PC frame"))),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TwoPcConfig {
    pub vote_timeout: Duration,
    pub decision_timeout: Duration,
    /// Schedule for PREPARE, votes and decisions.
    pub retry: ReliableConfig,
    /// Vote no while proposing or prepared for another proposal. Needed when
    /// the commit point does not itself reject a second concurrent winner.
    pub exclusive: bool,
}

impl Default for TwoPcConfig {
    fn default() -> Self {
        TwoPcConfig {
            vote_timeout: Duration::from_secs(2),
            decision_timeout: Duration::from_secs(120),
            retry: ReliableConfig::persistent(),
            exclusive: true,
        }
    }
}

/// Carries 2PC messages between the members of one connection.
#[async_trait]
pub trait Bus: Send + Sync + 'static {
    async fn send(&self, to: Endpoint, msg: TwoPcMsg) -> Result<()>;
}

/// Local side effects of a proposal at a participant.
#[async_trait]
pub trait Hooks<T>: Send + Sync + 'static {
    /// Decide a vote. `Some((info, prepared))` votes yes; `info` travels back
    /// to the proposer in the VOTE.
    fn check(&self, from: Endpoint, target: &[u8]) -> Option<(Vec<u8>, T)>;

    /// Apply a committed proposal. This is the participant's switching point.
    async fn commit(&self, pid: u64, prepared: T);

    fn aborted(&self, _pid: u64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Committed,
    Aborted,
}

struct State<T> {
    proposing: Option<u64>,
    prepared: BTreeMap<u64, (Endpoint, T)>,
}

/// Collects (voter, yes, info) for the running proposal.
type VoteTx = mpsc::UnboundedSender<(Endpoint, bool, Vec<u8>)>;

/// One endpoint's 2PC state: participant for others' proposals and
/// coordinator for its own.
pub struct TwoPcNode<T> {
    me: Endpoint,
    bus: Arc<dyn Bus>,
    hooks: Arc<dyn Hooks<T>>,
    cfg: TwoPcConfig,
    state: Mutex<State<T>>,
    votes: Mutex<Option<(u64, VoteTx)>>,
    decided: Mutex<BTreeMap<u64, Decision>>,
    weak: Weak<TwoPcNode<T>>,
}

impl<T: Send + 'static> TwoPcNode<T> {
    pub fn new(
        me: Endpoint,
        bus: Arc<dyn Bus>,
        hooks: Arc<dyn Hooks<T>>,
        cfg: TwoPcConfig,
    ) -> Arc<Self> {
        Arc::new_cyclic(|weak| TwoPcNode {
            me,
            bus,
            hooks,
            cfg,
            state: Mutex::new(State {
                proposing: None,
                prepared: BTreeMap::new(),
            }),
            votes: Mutex::new(None),
            decided: Mutex::new(BTreeMap::new()),
            weak: weak.clone(),
        })
    }

    pub fn me(&self) -> Endpoint {
        self.me
    }

    pub fn config(&self) -> &TwoPcConfig {
        &self.cfg
    }

    /// Every decision this endpoint reached, by proposal id.
    pub fn decisions(&self) -> BTreeMap<u64, Decision> {
        self.decided.lock().clone()
    }

    /// Proposals voted yes on and not yet decided.
    pub fn prepared(&self) -> Vec<u64> {
        self.state.lock().prepared.keys().copied().collect()
    }

    fn decide(&self, pid: u64, d: Decision) {
        let prev = self.decided.lock().insert(pid, d);
        debug_assert!(
            prev.is_none() || prev == Some(d),
            "conflicting decisions for {pid}"
        );
    }

    /// Feed one incoming message.
    pub async fn handle(&self, from: Endpoint, msg: TwoPcMsg) {
        match msg {
            TwoPcMsg::Prepare { pid, target } => {
                let vote = self.on_prepare(from, pid, &target);
                let bus = self.bus.clone();
                tokio::spawn(async move {
                    if let Err(e) = bus.send(from, vote).await {
                        tracing::debug!(%from, "vote not delivered: {e}");
                    }
                });
            }
            TwoPcMsg::Vote { pid, yes, info } => {
                if let Some((p, tx)) = &*self.votes.lock() {
                    if *p == pid {
                        let _ = tx.send((from, yes, info));
                    }
                }
            }
            TwoPcMsg::Commit { pid } => {
                let data = self.state.lock().prepared.remove(&pid);
                if let Some((_, d)) = data {
                    self.decide(pid, Decision::Committed);
                    self.hooks.commit(pid, d).await;
                }
            }
            TwoPcMsg::Abort { pid } => {
                if self.state.lock().prepared.remove(&pid).is_some() {
                    self.decide(pid, Decision::Aborted);
                    self.hooks.aborted(pid);
                }
            }
        }
    }

    fn on_prepare(&self, from: Endpoint, pid: u64, target: &[u8]) -> TwoPcMsg {
        let vote = |yes, info| TwoPcMsg::Vote { pid, yes, info };
        if let Some(d) = self.decided.lock().get(&pid) {
            return vote(*d == Decision::Committed, Vec::new());
        }
        let mut st = self.state.lock();
        if st.prepared.contains_key(&pid) {
            return vote(true, Vec::new());
        }
        if self.cfg.exclusive && (st.proposing.is_some() || !st.prepared.is_empty()) {
            return vote(false, Vec::new());
        }
        match self.hooks.check(from, target) {
            Some((info, data)) => {
                st.prepared.insert(pid, (from, data));
                drop(st);
                self.arm_decision_timer(pid);
                vote(true, info)
            }
            None => {
                drop(st);
                self.decide(pid, Decision::Aborted);
                vote(false, Vec::new())
            }
        }
    }

    fn arm_decision_timer(&self, pid: u64) {
        let weak = self.weak.clone();
        let wait = self.cfg.decision_timeout;
        tokio::spawn(async move {
            tokio::time::sleep(wait).await;
            let Some(node) = weak.upgrade() else { return };
            let expired = node.state.lock().prepared.remove(&pid);
            if let Some((from, _)) = expired {
                tracing::warn!(pid, coordinator = %from, "no decision; aborting");
                node.decide(pid, Decision::Aborted);
                node.hooks.aborted(pid);
            }
        });
    }

    /// Run a proposal as coordinator. `commit_point` runs after unanimous
    /// yes votes with each peer's vote info; its failure aborts the proposal.
    pub async fn propose<R: Send + 'static>(
        &self,
        peers: &[Endpoint],
        target: Vec<u8>,
        commit_point: impl FnOnce(Vec<(Endpoint, Vec<u8>)>) -> BoxFuture<'static, Result<R>>,
    ) -> Result<R> {
        let pid = loop {
            let p: u64 = rand::random();
            if p != 0 && !self.decided.lock().contains_key(&p) {
                break p;
            }
        };
        {
            let mut st = self.state.lock();
            if st.proposing.is_some() {
                return Err(Error::Aborted("another proposal is running".into()));
            }
            if self.cfg.exclusive {
                if let Some(other) = st.prepared.keys().next() {
                    return Err(Error::Aborted(format!("prepared for proposal {other:#x}")));
                }
            }
            st.proposing = Some(pid);
        }
        let (tx, mut rx) = mpsc::unbounded_channel();
        *self.votes.lock() = Some((pid, tx));

        let peers: BTreeSet<Endpoint> = peers.iter().copied().filter(|p| *p != self.me).collect();
        for &p in &peers {
            let bus = self.bus.clone();
            let msg = TwoPcMsg::Prepare {
                pid,
                target: target.clone(),
            };
            tokio::spawn(async move {
                if let Err(e) = bus.send(p, msg).await {
                    tracing::debug!(peer = %p, "prepare not delivered: {e}");
                }
            });
        }

        let deadline = tokio::time::Instant::now() + self.cfg.vote_timeout;
        let mut yes = BTreeMap::new();
        let mut veto = None;
        while yes.len() < peers.len() {
            match tokio::time::timeout_at(deadline, rx.recv()).await {
                Ok(Some((from, v, info))) if peers.contains(&from) => {
                    if v {
                        yes.entry(from).or_insert(info);
                    } else {
                        veto = Some(from);
                        break;
                    }
                }
                Ok(Some(_)) => {}
                Ok(None) | Err(_) => break,
            }
        }
        *self.votes.lock() = None;

        let outcome = if let Some(v) = veto {
            Err(Error::Aborted(format!("{v} voted no")))
        } else if yes.len() < peers.len() {
            let missing: Vec<_> = peers.iter().filter(|p| !yes.contains_key(p)).collect();
            Err(Error::Aborted(format!(
                "vote timeout waiting for {missing:?}"
            )))
        } else {
            commit_point(yes.into_iter().collect()).await
        };

        self.state.lock().proposing = None;
        let (decision, msg) = match outcome {
            Ok(_) => (Decision::Committed, TwoPcMsg::Commit { pid }),
            Err(_) => (Decision::Aborted, TwoPcMsg::Abort { pid }),
        };
        self.decide(pid, decision);
        for &p in &peers {
            let bus = self.bus.clone();
            let msg = msg.clone();
            tokio::spawn(async move {
                if let Err(e) = bus.send(p, msg).await {
                    tracing::warn!(peer = %p, "decision not delivered: {e}");
                }
            });
        }
        outcome
    }
}

/// A bus over reliable control channels of a [`Mux`], one per peer, all
/// sharing one connection id.
pub struct MeshBus {
    mux: Mux,
    conn_id: u64,
    retry: ReliableConfig,
    chans: Mutex<BTreeMap<Endpoint, ControlChannel>>,
}

impl MeshBus {
    pub fn new(mux: Mux, conn_id: u64, retry: ReliableConfig) -> Arc<Self> {
        Arc::new(MeshBus {
            mux,
            conn_id,
            retry,
            chans: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn channel(&self, peer: Endpoint) -> ControlChannel {
        self.chans
            .lock()
            .entry(peer)
            .or_insert_with(|| self.mux.channel(peer, self.conn_id))
            .clone()
    }

    /// Feed every 2PC frame arriving on `ch` into `node` until the channel closes.
    pub async fn serve<T: Send + 'static>(ch: ControlChannel, node: Arc<TwoPcNode<T>>) {
        while let Ok((tag, payload)) = ch.recv().await {
            match TwoPcMsg::decode(tag, &payload) {
                Ok(m) => {
                    let node = node.clone();
                    let from = ch.peer();
                    // handlers may await commit work; keep receiving meanwhile
                    tokio::spawn(async move { node.handle(from, m).await });
                }
                Err(e) => tracing::debug!("ignoring control frame: {e}"),
            }
        }
    }
}

#[async_trait]
impl Bus for MeshBus {
    async fn send(&self, to: Endpoint, msg: TwoPcMsg) -> Result<()> {
        self.channel(to)
            .send_with(msg.tag(), msg.payload(), self.retry)
            .await
    }
}
