//! The live datapath of a select node.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use arc_swap::ArcSwap;
use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::{Notify, RwLock};

use crate::chunnel::Lower;
use crate::datapath::{Conn, DataType, Datapath, Msg};
use crate::error::{Error, Result};
use crate::stack::SelectNode;

/// How a select synchronizes its datapath with a swap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwapMechanism {
    /// Every operation holds a shared lock; the swap takes it exclusively.
    #[default]
    Locked,
    /// Operations read a stop flag; a swap parks every registered thread at
    /// a barrier before touching the datapath.
    Barrier,
}

impl std::str::FromStr for SwapMechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "locked" | "lock" => Ok(SwapMechanism::Locked),
            "barrier" => Ok(SwapMechanism::Barrier),
            other => Err(Error::WrongMechanism(other.to_string())),
        }
    }
}

pub(crate) struct Active {
    pub conn: Conn,
    pub branch: u8,
    pub epoch: u64,
}

#[derive(Default)]
struct BarrierState {
    open: bool,
    arrived: usize,
}

pub struct SelectSlot {
    node: SelectNode,
    lower: Lower,
    data_type: DataType,
    active: ArcSwap<Active>,

    // locked mechanism
    rw: RwLock<()>,
    swap_pending: AtomicBool,

    // barrier mechanism
    stop: AtomicBool,
    barrier: Mutex<BarrierState>,
    arrivals: Notify,
    resume: Notify,
    members: AtomicUsize,

    /// Wakes operations blocked in the inner `recv` when a swap starts.
    interrupt: Notify,
    /// Locks taken by the barrier mechanism; stays zero without swaps.
    barrier_locks: AtomicU64,
    swaps: AtomicU64,
}

impl SelectSlot {
    pub(crate) fn new(node: SelectNode, lower: Lower, branch: u8, inner: Conn) -> Arc<Self> {
        Arc::new(SelectSlot {
            data_type: inner.data_type(),
            node,
            lower,
            active: ArcSwap::from_pointee(Active {
                conn: inner,
                branch,
                epoch: 0,
            }),
            rw: RwLock::new(()),
            swap_pending: AtomicBool::new(false),
            stop: AtomicBool::new(false),
            barrier: Mutex::new(BarrierState::default()),
            arrivals: Notify::new(),
            resume: Notify::new(),
            members: AtomicUsize::new(0),
            interrupt: Notify::new(),
            barrier_locks: AtomicU64::new(0),
            swaps: AtomicU64::new(0),
        })
    }

    pub fn node(&self) -> &SelectNode {
        &self.node
    }

    pub fn mechanism(&self) -> SwapMechanism {
        self.node.mechanism
    }

    pub(crate) fn lower(&self) -> &Lower {
        &self.lower
    }

    pub fn branch(&self) -> u8 {
        self.active.load().branch
    }

    pub fn epoch(&self) -> u64 {
        self.active.load().epoch
    }

    pub fn inner(&self) -> Conn {
        self.active.load().conn.clone()
    }

    pub fn barrier_lock_count(&self) -> u64 {
        self.barrier_locks.load(Ordering::Relaxed)
    }

    pub fn swap_count(&self) -> u64 {
        self.swaps.load(Ordering::Relaxed)
    }

    pub fn members(&self) -> usize {
        self.members.load(Ordering::SeqCst)
    }

    pub(crate) fn add_member(&self) {
        self.members.fetch_add(1, Ordering::SeqCst);
        self.arrivals.notify_one();
    }

    pub(crate) fn remove_member(&self) {
        self.members.fetch_sub(1, Ordering::SeqCst);
        // a departing member may be the one a barrier was waiting for
        self.arrivals.notify_one();
    }

    /// Swap under the exclusive lock. The new datapath is already built.
    pub(crate) async fn swap_locked(&self, branch: u8, conn: Conn, epoch: u64) -> Result<()> {
        self.swap_pending.store(true, Ordering::SeqCst);
        self.interrupt.notify_waiters();
        let res = {
            let _w = self.rw.write().await;
            let r = self.install(branch, conn, epoch);
            self.swap_pending.store(false, Ordering::SeqCst);
            r
        };
        res
    }

    /// Stop every registered thread, then build and install the new datapath.
    pub(crate) async fn swap_barrier<F>(&self, timeout: Duration, build: F) -> Result<()>
    where
        F: std::future::Future<Output = Result<(u8, Conn, u64)>> + Send,
    {
        self.barrier_locks.fetch_add(1, Ordering::Relaxed);
        {
            let mut b = self.barrier.lock();
            b.open = true;
            b.arrived = 0;
        }
        self.stop.store(true, Ordering::SeqCst);
        self.interrupt.notify_waiters();

        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let wake = self.arrivals.notified();
            tokio::pin!(wake);
            wake.as_mut().enable();
            let arrived = self.barrier.lock().arrived;
            if arrived >= self.members.load(Ordering::SeqCst) {
                break;
            }
            if tokio::time::timeout_at(deadline, wake).await.is_err() {
                self.release();
                return Err(Error::BarrierTimeout);
            }
        }

        // exclusive access from here to release()
        let res = match build.await {
            Ok((branch, conn, epoch)) => self.install(branch, conn, epoch),
            Err(e) => Err(e),
        };
        self.release();
        res
    }

    fn release(&self) {
        self.barrier_locks.fetch_add(1, Ordering::Relaxed);
        let mut b = self.barrier.lock();
        b.open = false;
        b.arrived = 0;
        self.stop.store(false, Ordering::SeqCst);
        drop(b);
        self.resume.notify_waiters();
    }

    /// Park at the barrier until the swap in progress resolves.
    async fn arrive(&self) {
        self.barrier_locks.fetch_add(1, Ordering::Relaxed);
        let resumed = self.resume.notified();
        tokio::pin!(resumed);
        {
            let mut b = self.barrier.lock();
            if !b.open {
                return;
            }
            resumed.as_mut().enable();
            b.arrived += 1;
        }
        self.arrivals.notify_one();
        resumed.await;
    }

    fn install(&self, branch: u8, conn: Conn, epoch: u64) -> Result<()> {
        let old = self.active.load();
        if let Some(st) = old.conn.export_state()? {
            let kind = st.kind;
            conn.import_state(st).map_err(|e| {
                Error::layer(
                    format!("select#{}", self.node.index()),
                    format!("no transfer path for {kind:?}: {e}"),
                )
            })?;
        }
        self.active.store(Arc::new(Active {
            conn,
            branch,
            epoch,
        }));
        self.swaps.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }
}

#[async_trait]
impl Datapath for SelectSlot {
    fn data_type(&self) -> DataType {
        self.data_type
    }

    async fn send(&self, batch: Vec<Msg>) -> Result<()> {
        match self.node.mechanism {
            SwapMechanism::Locked => {
                let _g = self.rw.read().await;
                let a = self.active.load();
                a.conn.send(batch).await
            }
            SwapMechanism::Barrier => {
                if self.stop.load(Ordering::Acquire) {
                    self.arrive().await;
                }
                let a = self.active.load();
                a.conn.send(batch).await
            }
        }
    }

    async fn recv(&self, slots: &mut [Option<Msg>]) -> Result<usize> {
        loop {
            let intr = self.interrupt.notified();
            match self.node.mechanism {
                SwapMechanism::Locked => {
                    if self.swap_pending.load(Ordering::SeqCst) {
                        // the writer is queued or about to be; wait our turn
                        drop(self.rw.read().await);
                        tokio::task::yield_now().await;
                        continue;
                    }
                    let _g = self.rw.read().await;
                    let a = self.active.load();
                    tokio::select! {
                        biased;
                        r = a.conn.recv(slots) => return r,
                        _ = intr => continue,
                    }
                }
                SwapMechanism::Barrier => {
                    if self.stop.load(Ordering::SeqCst) {
                        self.arrive().await;
                        continue;
                    }
                    let a = self.active.load();
                    tokio::select! {
                        biased;
                        r = a.conn.recv(slots) => return r,
                        _ = intr => {
                            self.arrive().await;
                            continue;
                        }
                    }
                }
            }
        }
    }

    fn export_state(&self) -> Result<Option<crate::datapath::TransferState>> {
        self.active.load().conn.export_state()
    }

    fn import_state(&self, st: crate::datapath::TransferState) -> Result<()> {
        self.active.load().conn.import_state(st)
    }
}
