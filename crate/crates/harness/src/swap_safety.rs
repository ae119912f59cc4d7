//! Many senders share one reliable connection while a swapper flips a
//! select back and forth at random points. The receiver checks every
//! message for exactly-once in-order delivery and for epoch-consistent
//! processing.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chunnel::chunnels::tag::take_prefix;
use chunnel::chunnels::{Reliability, TagChunnel};
use chunnel::reconfig::SwapMechanism;
use chunnel::transport::{SimNet, SimNetConfig, SimTransport};
use chunnel::{make_stack, select, CandidateStack, Endpoint, Layer, Lower, Msg};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone)]
pub struct SafetyConfig {
    pub mechanism: SwapMechanism,
    pub threads: usize,
    pub per_thread: u32,
    pub swaps: usize,
    /// Loss on the simulated link under the reliability layer.
    pub loss: f64,
    pub seed: u64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            mechanism: SwapMechanism::Barrier,
            threads: 8,
            per_thread: 10_000,
            swaps: 50,
            loss: 0.001,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SafetyReport {
    pub delivered: u64,
    pub swaps_done: usize,
    /// Messages delivered twice, out of order or skipped.
    pub order_violations: u64,
    /// Messages whose two stamps disagree or name the wrong implementation
    /// for their epoch, or whose epoch went backwards on a thread.
    pub epoch_violations: u64,
    pub retransmits: u64,
}

impl SafetyReport {
    pub fn clean(&self, expected: u64) -> bool {
        self.delivered == expected && self.order_violations == 0 && self.epoch_violations == 0
    }
}

/// Each branch has two stamping layers, so a message handled partly by the
/// old and partly by the new branch would carry disagreeing stamps.
fn branch(name: &str, id: u8) -> Vec<Layer> {
    vec![
        TagChunnel::new(format!("{name}-outer"), id).into(),
        TagChunnel::new(format!("{name}-inner"), id).into(),
    ]
}

pub async fn run(cfg: &SafetyConfig) -> Result<SafetyReport> {
    let net = SimNet::new(SimNetConfig::default().loss(cfg.loss).seed(cfg.seed));
    let (src, dst) = (Endpoint::sim(1, 4000), Endpoint::sim(2, 4000));
    let rel = Reliability::new();
    let sender = make_stack(vec![
        select(branch("a", 1), branch("b", 2))
            .with_mechanism(cfg.mechanism)
            .into(),
        rel.clone().into(),
        SimTransport::new(net.clone(), vec![src]).into(),
    ])?
    .instantiate(&CandidateStack(vec![0]), Lower::Unit, &Default::default())
    .await?;
    let receiver = make_stack(vec![
        Reliability::new().into(),
        SimTransport::new(net.clone(), vec![dst]).into(),
    ])?
    .instantiate(&CandidateStack::default(), Lower::Unit, &Default::default())
    .await?;

    let total = cfg.threads as u64 * u64::from(cfg.per_thread);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points: Vec<u64> = (0..cfg.swaps).map(|_| rng.gen_range(0..total)).collect();
    points.sort_unstable();

    let sent = Arc::new(AtomicU64::new(0));
    let mut senders = Vec::new();
    for t in 0..cfg.threads {
        let conn = sender.conn.clone();
        let reg = sender.handle.register_thread();
        let sent = sent.clone();
        let n = cfg.per_thread;
        senders.push(tokio::spawn(async move {
            let _reg = reg;
            for i in 0..n {
                let mut p = vec![t as u8];
                p.extend_from_slice(&i.to_be_bytes());
                conn.send(vec![Msg::bytes(dst, p)]).await?;
                sent.fetch_add(1, Ordering::Relaxed);
            }
            Ok::<_, chunnel::Error>(())
        }));
    }

    let handle = sender.handle.clone();
    let swap_sent = sent.clone();
    let swapper = tokio::spawn(async move {
        let mut done = 0usize;
        for p in points {
            while swap_sent.load(Ordering::Relaxed) < p {
                tokio::time::sleep(Duration::from_micros(50)).await;
            }
            let target = CandidateStack(vec![((done + 1) % 2) as u8]);
            match handle.reconfigure(&target).await {
                Ok(()) => done += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(done)
    });

    let threads = cfg.threads;
    let check = tokio::spawn(async move {
        let mut r = SafetyReport::default();
        let mut next = vec![0u32; threads];
        let mut last_epoch = vec![0u64; threads];
        let mut slots: Vec<Option<Msg>> = vec![None; 64];
        while r.delivered < total {
            let n = receiver.conn.recv(&mut slots).await?;
            for s in &mut slots[..n] {
                let (_, b) = s.take().expect("filled").into_bytes("safety")?;
                r.delivered += 1;
                let Ok((st, body)) = take_prefix(&b, 2) else {
                    r.epoch_violations += 1;
                    continue;
                };
                let t = body[0] as usize;
                let seq = u32::from_be_bytes(body[1..5].try_into().expect("4 bytes"));
                if t >= threads {
                    r.order_violations += 1;
                    continue;
                }
                let want_impl = if st[0].epoch % 2 == 0 { 1 } else { 2 };
                if st[0] != st[1] || st[0].impl_id != want_impl || st[0].epoch < last_epoch[t] {
                    r.epoch_violations += 1;
                }
                last_epoch[t] = last_epoch[t].max(st[0].epoch);
                if seq != next[t] {
                    r.order_violations += 1;
                }
                next[t] = seq.max(next[t]) + 1;
            }
        }
        // anything further is a duplicate
        let extra = tokio::time::timeout(
            Duration::from_millis(300),
            chunnel::recv_one(&*receiver.conn),
        )
        .await;
        if extra.is_ok() {
            r.order_violations += 1;
        }
        Ok::<_, chunnel::Error>(r)
    });

    for s in senders {
        s.await
            .map_err(|e| HarnessError::Violation(format!("sender panicked: {e}")))??;
    }
    let swaps_done = swapper
        .await
        .map_err(|e| HarnessError::Violation(format!("swapper panicked: {e}")))??;
    let mut report = tokio::time::timeout(Duration::from_secs(120), check)
        .await
        .map_err(|_| HarnessError::Violation("receiver stalled".into()))?
        .map_err(|e| HarnessError::Violation(format!("receiver panicked: {e}")))??;
    report.swaps_done = swaps_done;
    report.retransmits = rel.stats().retransmits();
    Ok(report)
}
