//! Multi-party negotiation through a transactional key-value store.
//!
//! The entry for a connection address holds the committed stack, its epoch
//! and the number of participants:
//!
//! ```text
//! entry := epoch:u64 count:u64 stack
//! ```

mod store;
mod tcp;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;

pub use store::{KvStore, MemStore, Txn, Versioned};
pub use tcp::{RendezvousServer, TcpStore};

use crate::datapath::Endpoint;
use crate::error::{Error, Result};
use crate::negotiate::{
    check_compat, encode_nonce, fingerprint, stacks_compatible, Capability, Fingerprint,
};
use crate::proto::offer::{encode_entries, read_entries};
use crate::proto::wire::{put_u64, Reader};
use crate::reconfig::twopc::TwoPcNode;
use crate::stack::futures_lite::BoxFuture;
use crate::stack::{CandidateStack, StackSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RendezvousEntry {
    pub epoch: u64,
    pub stack: Vec<Capability>,
    pub count: u64,
}

impl RendezvousEntry {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.count);
        encode_entries(&self.stack, &mut out);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, Error::Decode);
        let epoch = r.u64()?;
        let count = r.u64()?;
        let stack = read_entries(&mut r)?;
        r.finish()?;
        Ok(RendezvousEntry {
            epoch,
            stack,
            count,
        })
    }

    /// Fingerprint every participant's nonce carries for this entry.
    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint(&[&self.stack])
    }
}

/// A participant's view after joining or committing a transition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Joined {
    pub epoch: u64,
    /// Local branch choice compatible with the stored stack.
    pub choice: CandidateStack,
    /// The stored stack.
    pub stack: Vec<Capability>,
    pub count: u64,
}

impl Joined {
    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint(&[&self.stack])
    }

    pub fn nonce(&self) -> Vec<u8> {
        encode_nonce(&self.choice, &self.fingerprint())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinOutcome {
    /// First participant; our first candidate is now the connection's stack.
    Won(Joined),
    /// The stored stack works for us.
    Adopted(Joined),
    /// The stored stack is incompatible with every local candidate.
    Incompatible(Vec<Capability>),
}

impl JoinOutcome {
    pub fn joined(&self) -> Option<&Joined> {
        match self {
            JoinOutcome::Won(j) | JoinOutcome::Adopted(j) => Some(j),
            JoinOutcome::Incompatible(_) => None,
        }
    }
}

/// What a joiner does next given the current entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinStep {
    Done(JoinOutcome),
    /// Apply `txn`; if it commits the join finished with the outcome,
    /// otherwise re-read and plan again.
    Commit(Txn, JoinOutcome),
}

/// Pure planning step of a join.
pub fn plan_join(
    key: &str,
    existing: Option<&Versioned>,
    offer: &[(CandidateStack, Vec<Capability>)],
) -> Result<JoinStep> {
    let Some(cur) = existing else {
        let (choice, stack) = offer.first().cloned().ok_or(Error::EmptyStack)?;
        let entry = RendezvousEntry {
            epoch: 1,
            stack: stack.clone(),
            count: 1,
        };
        return Ok(JoinStep::Commit(
            Txn::new().expect(key, None).put(key, entry.encode()),
            JoinOutcome::Won(Joined {
                epoch: 1,
                choice,
                stack,
                count: 1,
            }),
        ));
    };
    let mut entry = RendezvousEntry::decode(&cur.value)?;
    let local: Vec<Vec<Capability>> = offer.iter().map(|(_, c)| c.clone()).collect();
    let Ok(pick) = check_compat(&local, std::slice::from_ref(&entry.stack)) else {
        return Ok(JoinStep::Done(JoinOutcome::Incompatible(entry.stack)));
    };
    entry.count += 1;
    let joined = Joined {
        epoch: entry.epoch,
        choice: offer[pick.client].0.clone(),
        stack: entry.stack.clone(),
        count: entry.count,
    };
    Ok(JoinStep::Commit(
        Txn::new()
            .expect(key, Some(cur.version))
            .put(key, entry.encode()),
        JoinOutcome::Adopted(joined),
    ))
}

/// A join as an explicit read/commit state machine over a [`MemStore`], for
/// driving interleavings step by step.
#[derive(Debug, Clone)]
pub struct JoinMachine {
    key: String,
    offer: Vec<(CandidateStack, Vec<Capability>)>,
    pending: Option<(Txn, JoinOutcome)>,
}

impl JoinMachine {
    pub fn new(addr: &str, spec: &StackSpec) -> Self {
        JoinMachine {
            key: addr.to_string(),
            offer: spec.offer(),
            pending: None,
        }
    }

    /// Perform one store operation. Returns the outcome once the join is over.
    pub fn step(&mut self, store: &MemStore) -> Result<Option<JoinOutcome>> {
        match self.pending.take() {
            None => match plan_join(&self.key, store.get_sync(&self.key)?.as_ref(), &self.offer)? {
                JoinStep::Done(o) => Ok(Some(o)),
                JoinStep::Commit(t, o) => {
                    self.pending = Some((t, o));
                    Ok(None)
                }
            },
            Some((t, o)) => Ok(store.transact_sync(&t)?.then_some(o)),
        }
    }
}

fn transition_payload(epoch: u64, stack: &[Capability]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, epoch);
    encode_entries(stack, &mut out);
    out
}

/// Decode a PREPARE target sent by [`Rendezvous::propose_transition`].
pub fn decode_transition(buf: &[u8]) -> Result<(u64, Vec<Capability>)> {
    let mut r = Reader::new(buf, Error::MalformedFrame);
    let epoch = r.u64()?;
    let stack = read_entries(&mut r)?;
    r.finish()?;
    Ok((epoch, stack))
}

/// Decide a participant's vote on a transition: the proposal must be for the
/// epoch right after ours and some local candidate must fit the new stack.
pub fn vote_on_transition(current: &Joined, spec: &StackSpec, target: &[u8]) -> Option<Joined> {
    let (epoch, stack) = decode_transition(target).ok()?;
    if epoch != current.epoch + 1 {
        return None;
    }
    let (choice, _) = spec
        .offer()
        .into_iter()
        .find(|(_, caps)| stacks_compatible(caps, &stack).is_some())?;
    Some(Joined {
        epoch,
        choice,
        stack,
        count: current.count,
    })
}

/// A participant's handle on the rendezvous store.
pub struct Rendezvous {
    store: Arc<dyn KvStore>,
    joined: Mutex<BTreeMap<String, u64>>,
    /// Addresses whose stored stack we could not join.
    refused: Mutex<std::collections::BTreeSet<String>>,
}

impl Rendezvous {
    pub fn new(store: Arc<dyn KvStore>) -> Self {
        Rendezvous {
            store,
            joined: Mutex::new(BTreeMap::new()),
            refused: Mutex::new(Default::default()),
        }
    }

    pub fn store(&self) -> &Arc<dyn KvStore> {
        &self.store
    }

    pub async fn entry(&self, addr: &str) -> Result<Option<(RendezvousEntry, u64)>> {
        match self.store.get(addr).await? {
            Some(v) => Ok(Some((RendezvousEntry::decode(&v.value)?, v.version))),
            None => Ok(None),
        }
    }

    pub async fn join(&self, addr: &str, spec: &StackSpec) -> Result<JoinOutcome> {
        let offer = spec.offer();
        loop {
            let cur = self.store.get(addr).await?;
            match plan_join(addr, cur.as_ref(), &offer)? {
                JoinStep::Done(o) => {
                    self.refused.lock().insert(addr.to_string());
                    return Ok(o);
                }
                JoinStep::Commit(t, o) => {
                    if self.store.transact(t).await? {
                        self.refused.lock().remove(addr);
                        *self.joined.lock().entry(addr.to_string()).or_default() += 1;
                        return Ok(o);
                    }
                }
            }
        }
    }

    pub async fn leave(&self, addr: &str) -> Result<()> {
        if self.joined.lock().get(addr).copied().unwrap_or(0) == 0 {
            return Err(Error::NotJoined);
        }
        loop {
            let Some(v) = self.store.get(addr).await? else {
                self.joined.lock().remove(addr);
                return Err(Error::NotJoined);
            };
            let mut e = RendezvousEntry::decode(&v.value)?;
            e.count = e.count.saturating_sub(1);
            let t = Txn::new().expect(addr, Some(v.version));
            let t = if e.count == 0 {
                t.delete(addr)
            } else {
                t.put(addr, e.encode())
            };
            if self.store.transact(t).await? {
                let mut j = self.joined.lock();
                if let Some(n) = j.get_mut(addr) {
                    *n -= 1;
                    if *n == 0 {
                        j.remove(addr);
                    }
                }
                return Ok(());
            }
        }
    }

    /// Move the connection at `addr` to `stack` by two-phase commit among
    /// `peers` through `node`. The commit point is a compare-and-swap on the
    /// stored epoch; `install` then switches the proposer locally. Allowed
    /// for members and for callers whose join found the stack incompatible.
    pub async fn propose_transition<T: Send + 'static>(
        &self,
        addr: &str,
        stack: Vec<Capability>,
        node: &TwoPcNode<T>,
        peers: &[Endpoint],
        install: impl FnOnce(RendezvousEntry) -> BoxFuture<'static, Result<()>> + Send + 'static,
    ) -> Result<RendezvousEntry> {
        if !self.joined.lock().contains_key(addr) && !self.refused.lock().contains(addr) {
            return Err(Error::NotJoined);
        }
        let (base, _) = self.entry(addr).await?.ok_or(Error::NotJoined)?;
        let next = base.epoch + 1;
        let store = self.store.clone();
        let key = addr.to_string();
        node.propose(peers, transition_payload(next, &stack), move |_votes| {
            Box::pin(async move {
                loop {
                    let v = store.get(&key).await?.ok_or(Error::CasConflict)?;
                    let cur = RendezvousEntry::decode(&v.value)?;
                    if cur.epoch != base.epoch {
                        return Err(Error::CasConflict);
                    }
                    let entry = RendezvousEntry {
                        epoch: next,
                        stack: stack.clone(),
                        count: cur.count,
                    };
                    let t = Txn::new()
                        .expect(&key, Some(v.version))
                        .put(&key, entry.encode());
                    // a concurrent join or leave only changes the count; retry
                    if store.transact(t).await? {
                        // the store now names the new stack; a local build
                        // failure cannot undo that
                        if let Err(e) = install(entry.clone()).await {
                            tracing::error!(epoch = next, "committed stack failed to build: {e}");
                        }
                        return Ok(entry);
                    }
                }
            })
        })
        .await
    }
}
