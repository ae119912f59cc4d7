use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use super::slot::{SelectSlot, SwapMechanism};
use crate::chunnel::{ReconfigClass, WrapContext};
use crate::error::{Error, LayerId, Result};
use crate::stack::{build_layers, CandidateStack, Layer, SlotRegistry, StackSpec};

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(2);

struct State {
    choice: CandidateStack,
    epoch: u64,
}

struct HandleInner {
    spec: StackSpec,
    state: Mutex<State>,
    registry: SlotRegistry,
    cx: WrapContext,
    /// One reconfiguration at a time; later requests queue here.
    busy: tokio::sync::Mutex<()>,
    barrier_timeout: Mutex<Duration>,
}

/// Swaps the select branches of one instantiated stack. Cloneable and usable
/// from any thread.
#[derive(Clone)]
pub struct ReconfigHandle {
    inner: Arc<HandleInner>,
}

/// Membership of one thread in the barrier group of every barrier select.
/// Dropping it leaves the group.
pub struct Registration {
    slots: Vec<Arc<SelectSlot>>,
}

impl Drop for Registration {
    fn drop(&mut self) {
        for s in &self.slots {
            s.remove_member();
        }
    }
}

impl ReconfigHandle {
    pub(crate) fn new(
        spec: StackSpec,
        choice: CandidateStack,
        registry: SlotRegistry,
        cx: WrapContext,
    ) -> Self {
        ReconfigHandle {
            inner: Arc::new(HandleInner {
                spec,
                state: Mutex::new(State {
                    choice,
                    epoch: cx.epoch,
                }),
                registry,
                cx,
                busy: tokio::sync::Mutex::new(()),
                barrier_timeout: Mutex::new(DEFAULT_BARRIER_TIMEOUT),
            }),
        }
    }

    pub fn spec(&self) -> &StackSpec {
        &self.inner.spec
    }

    pub fn choice(&self) -> CandidateStack {
        self.inner.state.lock().choice.clone()
    }

    /// Bumped once per completed reconfiguration.
    pub fn epoch(&self) -> u64 {
        self.inner.state.lock().epoch
    }

    pub fn slot(&self, select: usize) -> Option<Arc<SelectSlot>> {
        self.inner.registry.lock().get(&select).cloned()
    }

    pub fn set_barrier_timeout(&self, d: Duration) {
        *self.inner.barrier_timeout.lock() = d;
    }

    pub fn register_thread(&self) -> Registration {
        let slots: Vec<_> = self
            .inner
            .registry
            .lock()
            .values()
            .filter(|s| s.mechanism() == SwapMechanism::Barrier)
            .cloned()
            .collect();
        for s in &slots {
            s.add_member();
        }
        Registration { slots }
    }

    pub async fn reconfigure_unilateral_locked(&self, target: &CandidateStack) -> Result<()> {
        self.reconfigure_with(target, Some(SwapMechanism::Locked))
            .await
    }

    pub async fn reconfigure_unilateral_barrier(&self, target: &CandidateStack) -> Result<()> {
        self.reconfigure_with(target, Some(SwapMechanism::Barrier))
            .await
    }

    /// Swap every live select whose branch differs from `target`, each with
    /// its own mechanism.
    pub async fn reconfigure(&self, target: &CandidateStack) -> Result<()> {
        self.reconfigure_with(target, None).await
    }

    /// Flip one select to `branch`, keeping every other choice.
    pub async fn switch(&self, select: usize, branch: u8) -> Result<()> {
        let mut t = self.choice();
        if select >= t.0.len() {
            return Err(Error::InvalidCandidate(format!("no select #{select}")));
        }
        t.0[select] = branch;
        self.reconfigure(&t).await
    }

    async fn reconfigure_with(
        &self,
        target: &CandidateStack,
        want: Option<SwapMechanism>,
    ) -> Result<()> {
        self.inner.spec.validate(target)?;
        let _busy = self.inner.busy.lock().await;

        let live: Vec<(usize, Arc<SelectSlot>)> = self
            .inner
            .registry
            .lock()
            .iter()
            .map(|(i, s)| (*i, s.clone()))
            .collect();
        let todo: Vec<_> = live
            .into_iter()
            .filter(|(i, s)| s.branch() != target.0[*i])
            .collect();
        for (i, s) in &todo {
            if s.node().reconfig_class() == ReconfigClass::Multilateral {
                return Err(Error::WrongMechanism(format!(
                    "select #{i} holds multilateral chunnels and needs agreement"
                )));
            }
            if let Some(m) = want {
                if s.mechanism() != m {
                    return Err(Error::WrongMechanism(format!(
                        "select #{i} uses {:?}, not {m:?}",
                        s.mechanism()
                    )));
                }
            }
        }
        if todo.is_empty() {
            return Ok(());
        }

        let epoch = self.epoch() + 1;
        let cx = WrapContext {
            epoch,
            ..self.inner.cx.clone()
        };
        let mut done = Vec::new();
        for (i, slot) in todo {
            // a previous iteration may have rebuilt this select's parent
            if !self
                .inner
                .registry
                .lock()
                .get(&i)
                .is_some_and(|s| Arc::ptr_eq(s, &slot))
            {
                continue;
            }
            let b = target.0[i];
            let fresh: SlotRegistry = Default::default();
            let node = slot.node().clone();
            let build = async {
                let conn = build_layers(
                    node.branch(b),
                    slot.lower().clone(),
                    &target.0,
                    &cx,
                    &fresh,
                    None,
                )
                .await?;
                Ok((b, conn, epoch))
            };
            let res = match slot.mechanism() {
                SwapMechanism::Locked => match build.await {
                    Ok((b, conn, e)) => slot.swap_locked(b, conn, e).await,
                    Err(e) => Err(e),
                },
                SwapMechanism::Barrier => {
                    let t = *self.inner.barrier_timeout.lock();
                    slot.swap_barrier(t, build).await
                }
            };
            match res {
                Ok(()) => {}
                Err(e @ (Error::InitFailure { .. } | Error::BarrierTimeout)) => return Err(e),
                Err(e) => {
                    return Err(Error::InitFailure {
                        layer: LayerId {
                            index: i,
                            name: format!("select#{i}"),
                        },
                        reason: e.to_string(),
                    })
                }
            }
            let mut reg = self.inner.registry.lock();
            for j in nested(node.branch(1 - b)) {
                reg.remove(&j);
            }
            reg.extend(fresh.lock().iter().map(|(k, v)| (*k, v.clone())));
            done.push(i);
        }

        let mut st = self.inner.state.lock();
        for i in done {
            st.choice.0[i] = target.0[i];
            if let Some(node) = self.inner.spec.select_node(i) {
                for j in nested(&node.left).into_iter().chain(nested(&node.right)) {
                    st.choice.0[j] = target.0[j];
                }
            }
        }
        st.epoch = epoch;
        Ok(())
    }
}

fn nested(layers: &[Layer]) -> Vec<usize> {
    let mut out = Vec::new();
    for l in layers {
        if let Layer::Select(s) = l {
            out.push(s.index());
            out.extend(nested(&s.left));
            out.extend(nested(&s.right));
        }
    }
    out
}
