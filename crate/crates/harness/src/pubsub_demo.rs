//! A publisher and one receiver share a topic with receive-side ordering;
//! optionally a second receiver arrives mid-stream and moves everyone to
//! provider ordering through a committed transition.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chunnel::chunnels::{Format, Ordering, Serialize};
use chunnel::negotiate::Capability;
use chunnel::pubsub::{Member, Topic, TopicConfig, TopicTransport};
use chunnel::reconfig::twopc::Decision;
use chunnel::rendezvous::{JoinOutcome, MemStore, Rendezvous};
use chunnel::{make_stack, select, Endpoint, Layer, Msg, Record, StackSpec};
use tokio::time::Instant;

use crate::error::{HarnessError, Result};

const ADDR: &str = "topic/demo";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    SingleReceiver,
    SecondReceiver,
    /// The second receiver only speaks another serialization format.
    IncompatibleReceiver,
}

#[derive(Debug, Clone)]
pub struct PubsubConfig {
    pub scenario: Scenario,
    /// Sent before and again after the second receiver starts.
    pub per_phase: u64,
    pub interarrival: Duration,
    pub groups: u32,
    pub seed: u64,
}

impl Default for PubsubConfig {
    fn default() -> Self {
        PubsubConfig {
            scenario: Scenario::SecondReceiver,
            per_phase: 100,
            interarrival: Duration::from_millis(25),
            groups: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub receiver: Endpoint,
    pub epoch: u64,
    pub group: u32,
    pub seq: u64,
    /// Publication index.
    pub index: u64,
}

#[derive(Debug, Clone)]
pub struct PubsubReport {
    pub sent: u64,
    pub deliveries: Vec<Delivery>,
    /// Epoch of every member at the end.
    pub final_epochs: Vec<Option<u64>>,
    pub committed: usize,
    /// Messages published after the second receiver started that were
    /// still delivered on the original stack.
    pub old_stack_after_join: usize,
    pub events: Vec<String>,
}

fn ep(h: u16) -> Endpoint {
    Endpoint::sim(h, 7000)
}

fn spec(
    topic: &Arc<Topic>,
    me: Endpoint,
    recv_side: bool,
    fmt: Format,
    receives: bool,
) -> Result<StackSpec> {
    let rs = || {
        if receives {
            Ordering::recv_side_on(topic.clone(), me)
        } else {
            Ordering::recv_side()
        }
    };
    let top: Layer = if recv_side {
        select(rs(), Ordering::provider(topic.clone(), me)).into()
    } else {
        Ordering::provider(topic.clone(), me).into()
    };
    Ok(make_stack(vec![
        top,
        Serialize::new(fmt).into(),
        TopicTransport::new(topic.clone(), me).into(),
    ])?)
}

struct Log {
    start: Instant,
    events: Mutex<Vec<String>>,
    deliveries: Mutex<Vec<Delivery>>,
}

impl Log {
    fn event(&self, s: impl Into<String>) {
        let s = s.into();
        let t = self.start.elapsed().as_millis();
        tracing::info!("{s}");
        self.events
            .lock()
            .expect("log")
            .push(format!("{t:>6} ms  {s}"));
    }
}

fn start_receiver(m: Arc<Member>, log: Arc<Log>) -> tokio::task::JoinHandle<chunnel::Error> {
    tokio::spawn(async move {
        loop {
            match m.recv().await {
                Ok((epoch, msg)) => {
                    let Ok((_, r)) = msg.into_record("demo") else {
                        return chunnel::Error::Decode("not a record".into());
                    };
                    let Some(t) = r.order else {
                        return chunnel::Error::Decode("untagged record".into());
                    };
                    let index = r.key.trim_start_matches('m').parse().unwrap_or(u64::MAX);
                    log.deliveries.lock().expect("log").push(Delivery {
                        receiver: m.id(),
                        epoch,
                        group: t.group,
                        seq: t.seq,
                        index,
                    });
                }
                Err(e) => return e,
            }
        }
    })
}

struct Publisher {
    m: Arc<Member>,
    next: BTreeMap<u32, u64>,
    sent: u64,
    groups: u32,
    gap: Duration,
}

impl Publisher {
    async fn publish(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            let g = (self.sent % u64::from(self.groups)) as u32;
            let s = self.next.entry(g).or_insert(0);
            let r = Record::new(format!("m{}", self.sent), vec![0; 16]).ordered(g, *s);
            *s += 1;
            self.sent += 1;
            self.m
                .send(vec![Msg::record(Endpoint::unspecified(), r)])
                .await?;
            tokio::time::sleep(self.gap).await;
        }
        Ok(())
    }
}

fn provider_stack() -> Vec<Capability> {
    vec![
        Capability::compositional("order", ["provider"]),
        Capability::exact("serialize", ["fmtA"]),
    ]
}

pub async fn run(cfg: &PubsubConfig) -> Result<PubsubReport> {
    let topic = Topic::new(TopicConfig {
        seed: cfg.seed,
        ..TopicConfig::default()
    });
    let store = MemStore::new();
    let log = Arc::new(Log {
        start: Instant::now(),
        events: Mutex::default(),
        deliveries: Mutex::default(),
    });
    let member = |h: u16, recv_side: bool, fmt: Format, receives: bool| -> Result<Arc<Member>> {
        Ok(Member::new(
            topic.clone(),
            ep(h),
            ADDR,
            spec(&topic, ep(h), recv_side, fmt, receives)?,
            Rendezvous::new(store.clone()),
            receives,
        ))
    };
    let publisher = member(1, true, Format::A, false)?;
    let outcome = publisher.join().await?;
    log.event(format!("publisher joined: {}", describe(&outcome)));
    let r1 = member(2, true, Format::A, true)?;
    let outcome = r1.join().await?;
    log.event(format!("receiver 1 joined: {}", describe(&outcome)));
    let r1_task = start_receiver(r1.clone(), log.clone());
    let mut p = Publisher {
        m: publisher.clone(),
        next: BTreeMap::new(),
        sent: 0,
        groups: cfg.groups.max(1),
        gap: cfg.interarrival,
    };

    p.publish(cfg.per_phase).await?;
    let joined_at = p.sent;
    let mut members = vec![publisher.clone(), r1.clone()];
    let mut second = None;
    match cfg.scenario {
        Scenario::SingleReceiver => p.publish(cfg.per_phase).await?,
        Scenario::SecondReceiver | Scenario::IncompatibleReceiver => {
            let (recv_side, fmt) = match cfg.scenario {
                Scenario::SecondReceiver => (false, Format::A),
                _ => (true, Format::B),
            };
            let r2 = member(3, recv_side, fmt, true)?;
            let outcome = r2.join().await?;
            log.event(format!("receiver 2 joined: {}", describe(&outcome)));
            if !matches!(outcome, JoinOutcome::Incompatible(_)) {
                return Err(HarnessError::Violation(
                    "second receiver should not adopt receive-side ordering".into(),
                ));
            }
            members.push(r2.clone());
            if cfg.scenario == Scenario::SecondReceiver {
                second = Some(start_receiver(r2.clone(), log.clone()));
                log.event("receiver 2 proposes provider ordering");
                let r2c = r2.clone();
                let switch = tokio::spawn(async move { r2c.transition(provider_stack()).await });
                p.publish(cfg.per_phase).await?;
                let joined = switch
                    .await
                    .map_err(|e| HarnessError::Violation(format!("transition panicked: {e}")))??;
                log.event(format!("transition committed at epoch {}", joined.epoch));
            } else {
                p.publish(cfg.per_phase).await?;
            }
        }
    }
    // let in-flight records land
    tokio::time::sleep(Duration::from_secs(2)).await;
    if r1_task.is_finished() {
        let e = r1_task
            .await
            .map_err(|e| HarnessError::Violation(e.to_string()))?;
        return Err(HarnessError::Violation(format!("receiver 1 failed: {e}")));
    }
    r1_task.abort();
    if let Some(t) = second {
        t.abort();
    }

    let committed = publisher
        .node()
        .decisions()
        .values()
        .filter(|d| **d == Decision::Committed)
        .count();
    let deliveries = log.deliveries.lock().expect("log").clone();
    let old_stack_after_join = deliveries
        .iter()
        .filter(|d| d.index >= joined_at && d.epoch == 1)
        .count();
    let report = PubsubReport {
        sent: p.sent,
        final_epochs: members.iter().map(|m| m.epoch()).collect(),
        committed,
        old_stack_after_join,
        deliveries,
        events: Vec::new(),
    };
    verify(cfg, &report)?;
    log.event(format!(
        "delivered {} of {} in per-group order; {} post-join messages used the original stack",
        report.deliveries.len(),
        report.sent,
        report.old_stack_after_join
    ));
    let events = log.events.lock().expect("log").clone();
    Ok(PubsubReport { events, ..report })
}

fn describe(o: &JoinOutcome) -> String {
    match o {
        JoinOutcome::Won(j) => format!("created the topic at epoch {}", j.epoch),
        JoinOutcome::Adopted(j) => format!("adopted the stack at epoch {}", j.epoch),
        JoinOutcome::Incompatible(_) => "incompatible with the stored stack".into(),
    }
}

/// Exactly-once, per-group order and the expected transition count.
pub fn verify(cfg: &PubsubConfig, r: &PubsubReport) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut next: BTreeMap<u32, u64> = BTreeMap::new();
    for d in &r.deliveries {
        if !seen.insert(d.index) {
            return Err(HarnessError::Violation(format!(
                "message {} delivered twice",
                d.index
            )));
        }
        let n = next.entry(d.group).or_insert(0);
        if d.seq != *n {
            return Err(HarnessError::Violation(format!(
                "group {} delivered seq {} before {}",
                d.group, d.seq, n
            )));
        }
        *n += 1;
    }
    if seen.len() as u64 != r.sent {
        return Err(HarnessError::Violation(format!(
            "{} of {} messages delivered",
            seen.len(),
            r.sent
        )));
    }
    let (want_commits, want_epoch) = match cfg.scenario {
        Scenario::SecondReceiver => (1, 2),
        _ => (0, 1),
    };
    if r.committed != want_commits {
        return Err(HarnessError::Violation(format!(
            "{} committed transitions, expected {want_commits}",
            r.committed
        )));
    }
    let joined: Vec<u64> = r.final_epochs.iter().flatten().copied().collect();
    if joined.iter().any(|&e| e != want_epoch) {
        return Err(HarnessError::Violation(format!(
            "members ended at epochs {joined:?}, expected {want_epoch}"
        )));
    }
    if cfg.scenario != Scenario::SecondReceiver && r.deliveries.iter().any(|d| d.epoch != 1) {
        return Err(HarnessError::Violation(
            "a record left the original stack".into(),
        ));
    }
    Ok(())
}
