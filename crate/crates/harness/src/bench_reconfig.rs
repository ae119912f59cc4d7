//! Echo latency around a runtime swap, for the locked and barrier
//! mechanisms.
//!
//! Client threads share one reliable connection in a closed loop. Waiting
//! threads all receive on the connection and hand each reply to the thread
//! that sent its request, so every thread is always inside a datapath call
//! and a barrier can gather them. After `swap_after` replies the stack
//! switches to a branch whose construction takes `setup`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chunnel::chunnels::tag::{take_prefix, take_suffix};
use chunnel::chunnels::{Reliability, TagChunnel};
use chunnel::reconfig::SwapMechanism;
use chunnel::{
    make_stack, select, Accepts, CandidateStack, Chunnel, Conn, Endpoint, Error, Layer, Lower, Msg,
    Produces, WrapContext,
};
use tokio::sync::mpsc;
use tokio::time::Instant;

use crate::error::{HarnessError, Result};
use crate::loopback::Loopback;
use crate::metrics::{median, LatencyReport, Recorder, Sample, EPOCH};

/// A pass-through layer whose construction takes a while, standing in for
/// an implementation with expensive setup.
pub struct SlowSetup {
    setup: Duration,
}

impl SlowSetup {
    pub fn new(setup: Duration) -> Arc<Self> {
        Arc::new(SlowSetup { setup })
    }
}

#[async_trait]
impl Chunnel for SlowSetup {
    fn name(&self) -> &str {
        "slow-setup"
    }

    fn accepts(&self) -> Accepts {
        Accepts::Any
    }

    fn produces(&self) -> Produces {
        Produces::SameAsInput
    }

    async fn connect_wrap(&self, lower: Lower, _cx: &WrapContext) -> chunnel::Result<Conn> {
        tokio::time::sleep(self.setup).await;
        match lower {
            Lower::Conn(c) => Ok(c),
            Lower::Unit => Err(Error::NoBootstrapLayer),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconfigBenchConfig {
    pub mechanism: SwapMechanism,
    pub threads: usize,
    pub requests_per_thread: u32,
    /// Completed requests before the swap starts; `None` never swaps.
    pub swap_after: Option<u64>,
    pub msg_size: usize,
    pub setup: Duration,
}

impl Default for ReconfigBenchConfig {
    fn default() -> Self {
        ReconfigBenchConfig {
            mechanism: SwapMechanism::Barrier,
            threads: 8,
            requests_per_thread: 5000,
            swap_after: Some(20_000),
            msg_size: 64,
            setup: Duration::from_millis(2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconfigRun {
    pub mechanism: SwapMechanism,
    pub samples: Vec<Sample>,
    pub report: LatencyReport,
    /// Start and end of the swap, from the start of the run.
    pub swap: Option<(Duration, Duration)>,
    /// Requests not in flight at any point of the swap.
    pub steady_median: Duration,
    /// Requests in flight at some point of the swap.
    pub transient_median: Option<Duration>,
    pub transient_count: usize,
    /// Replies by the implementation that sent the request.
    pub regimes: BTreeMap<u8, u64>,
    pub spike_localized: bool,
}

/// Echo server: reliability over the loopback, replies to each sender.
async fn serve(conn: Conn) -> chunnel::Result<()> {
    let mut slots: Vec<Option<Msg>> = vec![None; 32];
    loop {
        let n = conn.recv(&mut slots).await?;
        let back = slots[..n]
            .iter_mut()
            .map(|s| s.take().expect("filled"))
            .collect();
        conn.send(back).await?;
    }
}

struct Reply {
    seq: u32,
    sent_by: u8,
    epoch: u64,
}

pub async fn run(cfg: &ReconfigBenchConfig) -> Result<ReconfigRun> {
    let (a, b) = Loopback::pair(Endpoint::sim(1, 5000), Endpoint::sim(2, 5000));
    let server_ep = b.local();
    let tag = |n: &str, id| -> Layer { TagChunnel::new(n, id).into() };
    let client = make_stack(vec![
        select(
            tag("impl-a", 1),
            vec![SlowSetup::new(cfg.setup).into(), tag("impl-b", 2)],
        )
        .with_mechanism(cfg.mechanism)
        .into(),
        Reliability::new().into(),
        a.into(),
    ])?
    .instantiate(&CandidateStack(vec![0]), Lower::Unit, &Default::default())
    .await?;
    let server = make_stack(vec![Reliability::new().into(), b.into()])?
        .instantiate(&CandidateStack::default(), Lower::Unit, &Default::default())
        .await?;
    let server_task = tokio::spawn(serve(server.conn));

    let rec = Arc::new(Recorder::new(Instant::now()));
    let done = Arc::new(AtomicU64::new(0));
    let swap_go = Arc::new(tokio::sync::Notify::new());
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..cfg.threads)
        .map(|_| mpsc::unbounded_channel::<Reply>())
        .unzip();
    let txs = Arc::new(txs);
    let mut tasks = Vec::new();
    for (t, mut my) in rxs.into_iter().enumerate() {
        let conn = client.conn.clone();
        let reg = client.handle.register_thread();
        let (rec, done, txs, swap_go) = (rec.clone(), done.clone(), txs.clone(), swap_go.clone());
        let (n, size, trigger) = (cfg.requests_per_thread, cfg.msg_size.max(5), cfg.swap_after);
        tasks.push(tokio::spawn(async move {
            let _reg = reg;
            let mut regimes: BTreeMap<u8, u64> = BTreeMap::new();
            let mut slots: Vec<Option<Msg>> = vec![None; 8];
            let mut last_epoch = 0;
            for i in 0..n {
                let mut p = vec![0u8; size];
                p[0] = t as u8;
                p[1..5].copy_from_slice(&i.to_be_bytes());
                let issued = Instant::now();
                conn.send(vec![Msg::bytes(server_ep, p)]).await?;
                let reply = loop {
                    tokio::select! {
                        biased;
                        r = my.recv() => break r.expect("senders live"),
                        n = conn.recv(&mut slots) => {
                            for s in &mut slots[..n?] {
                                dispatch(s.take().expect("filled"), &txs)?;
                            }
                        }
                    }
                };
                rec.record(issued, Instant::now());
                if reply.seq != i {
                    return Err(HarnessError::Violation(format!(
                        "thread {t}: expected reply {i}, got {}",
                        reply.seq
                    )));
                }
                if reply.epoch < last_epoch {
                    return Err(HarnessError::Violation(format!(
                        "thread {t}: epoch went back to {}",
                        reply.epoch
                    )));
                }
                last_epoch = reply.epoch;
                *regimes.entry(reply.sent_by).or_default() += 1;
                if Some(done.fetch_add(1, Ordering::Relaxed) + 1) == trigger {
                    swap_go.notify_one();
                }
            }
            Ok::<_, HarnessError>(regimes)
        }));
    }

    let swap = match cfg.swap_after {
        Some(_) => {
            let handle = client.handle.clone();
            let mech = cfg.mechanism;
            let rec = rec.clone();
            Some(tokio::spawn(async move {
                swap_go.notified().await;
                let start = Instant::now();
                let target = CandidateStack(vec![1]);
                match mech {
                    SwapMechanism::Locked => handle.reconfigure_unilateral_locked(&target).await?,
                    SwapMechanism::Barrier => {
                        handle.reconfigure_unilateral_barrier(&target).await?
                    }
                }
                let end = Instant::now();
                Ok::<_, chunnel::Error>((start - rec.start(), end - rec.start()))
            }))
        }
        None => None,
    };

    let total = cfg.threads as u64 * u64::from(cfg.requests_per_thread);
    let mut regimes: BTreeMap<u8, u64> = BTreeMap::new();
    for t in tasks {
        let r = t
            .await
            .map_err(|e| HarnessError::Violation(format!("client panicked: {e}")))??;
        for (k, v) in r {
            *regimes.entry(k).or_default() += v;
        }
    }
    let swap = match swap {
        Some(s) => Some(
            tokio::time::timeout(Duration::from_secs(10), s)
                .await
                .map_err(|_| HarnessError::Violation("swap never triggered".into()))?
                .map_err(|e| HarnessError::Violation(format!("swapper panicked: {e}")))??,
        ),
        None => None,
    };
    server_task.abort();

    let samples = rec.samples();
    if samples.len() as u64 != total {
        return Err(HarnessError::Violation(format!(
            "{} of {total} requests answered",
            samples.len()
        )));
    }
    Ok(summarize(cfg.mechanism, samples, swap, regimes))
}

fn dispatch(m: Msg, txs: &[mpsc::UnboundedSender<Reply>]) -> Result<()> {
    let (_, b) = m.into_bytes("bench")?;
    let (st, rest) = take_prefix(&b, 1)?;
    let (body, _) = take_suffix(rest, 1)?;
    if body.len() < 5 || body[0] as usize >= txs.len() {
        return Err(HarnessError::Violation("malformed echo".into()));
    }
    let seq = u32::from_be_bytes(body[1..5].try_into().expect("4 bytes"));
    let _ = txs[body[0] as usize].send(Reply {
        seq,
        sent_by: st[0].impl_id,
        epoch: st[0].epoch,
    });
    Ok(())
}

pub fn summarize(
    mechanism: SwapMechanism,
    samples: Vec<Sample>,
    swap: Option<(Duration, Duration)>,
    regimes: BTreeMap<u8, u64>,
) -> ReconfigRun {
    let overlaps = |s: &Sample, (a, b): (Duration, Duration)| s.at <= b && s.at + s.latency >= a;
    let (transient, steady): (Vec<Sample>, Vec<Sample>) = match swap {
        Some(w) => samples.iter().partition(|s| overlaps(s, w)),
        None => (Vec::new(), samples.clone()),
    };
    let lat = |v: &[Sample]| v.iter().map(|s| s.latency).collect::<Vec<_>>();
    let report = LatencyReport::from_samples(&samples, EPOCH);
    let spike_localized = spike_localized(&report, swap);
    ReconfigRun {
        mechanism,
        steady_median: median(&lat(&steady)).unwrap_or_default(),
        transient_median: median(&lat(&transient)),
        transient_count: transient.len(),
        samples,
        report,
        swap,
        regimes,
        spike_localized,
    }
}

/// Every epoch whose p95 stands out (over three times the median epoch
/// p95) overlaps the swap.
pub fn spike_localized(report: &LatencyReport, swap: Option<(Duration, Duration)>) -> bool {
    let mut p95: Vec<Duration> = report.rows.iter().map(|r| r.p95).collect();
    p95.sort();
    let Some(&typical) = p95.get(p95.len() / 2) else {
        return true;
    };
    report.rows.iter().filter(|r| r.p95 > typical * 3).all(|r| {
        let start = Duration::from_millis(r.epoch_ms);
        let end = start + report.epoch;
        // a request issued just before the swap can finish inside it
        swap.is_some_and(|(a, b)| start <= b && end + report.epoch >= a)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(at_ms: u64, lat_us: u64) -> Sample {
        Sample {
            at: Duration::from_millis(at_ms),
            latency: Duration::from_micros(lat_us),
        }
    }

    #[test]
    fn transient_is_whatever_overlaps_the_swap() {
        let samples = vec![s(10, 10), s(99, 2000), s(101, 5000), s(150, 10), s(300, 10)];
        let w = (Duration::from_millis(100), Duration::from_millis(103));
        let r = summarize(SwapMechanism::Barrier, samples, Some(w), BTreeMap::new());
        assert_eq!(r.transient_count, 2);
        assert_eq!(r.transient_median, Some(Duration::from_micros(2000)));
        assert_eq!(r.steady_median, Duration::from_micros(10));
    }

    #[test]
    fn spike_outside_the_swap_is_flagged() {
        let mut samples: Vec<Sample> = (0..500).map(|i| s(i, 10)).collect();
        for i in 0..50 {
            samples.push(s(420 + i % 10, 900));
        }
        let report = LatencyReport::from_samples(&samples, EPOCH);
        let at = |ms| Some((Duration::from_millis(ms), Duration::from_millis(ms + 2)));
        assert!(spike_localized(&report, at(410)));
        assert!(!spike_localized(&report, at(110)));
        assert!(!spike_localized(&report, None));
    }
}

/// Both mechanisms measured in alternating rounds, samples pooled per
/// mechanism, so drift in the machine falls on both alike.
#[derive(Debug, Clone)]
pub struct PairedTrial {
    pub locked: ReconfigRun,
    pub barrier: ReconfigRun,
}

pub async fn paired_trial(base: &ReconfigBenchConfig, rounds: usize) -> Result<PairedTrial> {
    let mut pooled: BTreeMap<bool, Vec<ReconfigRun>> = BTreeMap::new();
    for round in 0..rounds.max(1) {
        // alternate which mechanism goes first
        let order = if round % 2 == 0 {
            [SwapMechanism::Locked, SwapMechanism::Barrier]
        } else {
            [SwapMechanism::Barrier, SwapMechanism::Locked]
        };
        for mechanism in order {
            let cfg = ReconfigBenchConfig {
                mechanism,
                ..base.clone()
            };
            let r = run(&cfg).await?;
            pooled
                .entry(mechanism == SwapMechanism::Barrier)
                .or_default()
                .push(r);
        }
    }
    let merge = |runs: Vec<ReconfigRun>| {
        let mechanism = runs[0].mechanism;
        let mut steady = Vec::new();
        let mut transient = Vec::new();
        let mut regimes: BTreeMap<u8, u64> = BTreeMap::new();
        for r in &runs {
            for s in &r.samples {
                let in_swap = r
                    .swap
                    .is_some_and(|(a, b)| s.at <= b && s.at + s.latency >= a);
                if in_swap {
                    transient.push(s.latency);
                } else {
                    steady.push(s.latency);
                }
            }
            for (k, v) in &r.regimes {
                *regimes.entry(*k).or_default() += v;
            }
        }
        let first = runs.into_iter().next().expect("at least one round");
        ReconfigRun {
            mechanism,
            steady_median: median(&steady).unwrap_or_default(),
            transient_median: median(&transient),
            transient_count: transient.len(),
            regimes,
            spike_localized: first.spike_localized,
            ..first
        }
    };
    Ok(PairedTrial {
        locked: merge(pooled.remove(&false).expect("locked rounds")),
        barrier: merge(pooled.remove(&true).expect("barrier rounds")),
    })
}
