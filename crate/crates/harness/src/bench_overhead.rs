//! Throughput with a stack of no-op chunnels over the loopback transport.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use chunnel::chunnels::Noop;
use chunnel::{make_stack, CandidateStack, Conn, Endpoint, Layer, Lower, Msg};

use crate::error::{HarnessError, Result};
use crate::loopback::Loopback;

pub const THROUGHPUT_HEADER: &str = "chunnels,msg_size,msgs_per_s,gbits_per_s";
pub const SIZES: [usize; 4] = [64, 128, 512, 1460];

#[derive(Debug, Clone)]
pub struct OverheadConfig {
    pub chunnels: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Messages per measurement.
    pub messages: u64,
    pub batch: usize,
    /// Each row is the median over this many measurements.
    pub trials: usize,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        OverheadConfig {
            chunnels: (0..=5).collect(),
            sizes: SIZES.to_vec(),
            messages: 400_000,
            batch: 32,
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputRow {
    pub chunnels: usize,
    pub msg_size: usize,
    pub msgs_per_s: f64,
    pub gbits_per_s: f64,
}

async fn endpoint(t: std::sync::Arc<Loopback>, chunnels: usize) -> Result<Conn> {
    let mut layers: Vec<Layer> = (0..chunnels).map(|_| Noop::new().into()).collect();
    layers.push(t.into());
    let inst = make_stack(layers)?
        .instantiate(&CandidateStack::default(), Lower::Unit, &Default::default())
        .await?;
    Ok(inst.conn)
}

/// One timed transfer of `messages` messages of `size` bytes, with
/// `chunnels` no-ops on each end.
pub async fn measure(
    chunnels: usize,
    size: usize,
    messages: u64,
    batch: usize,
) -> Result<ThroughputRow> {
    let (a, b) = Loopback::pair(Endpoint::sim(1, 9000), Endpoint::sim(2, 9000));
    let dst = b.local();
    let tx = endpoint(a, chunnels).await?;
    let rx = endpoint(b, chunnels).await?;
    let start = Instant::now();
    let receiver = tokio::spawn(async move {
        let mut slots: Vec<Option<Msg>> = vec![None; batch];
        let mut got = 0u64;
        while got < messages {
            let n = rx.recv(&mut slots).await?;
            for s in &mut slots[..n] {
                let (_, b) = s.take().expect("filled").into_bytes("bench")?;
                if b.len() != size {
                    return Err(HarnessError::Violation(format!(
                        "message of {} bytes, sent {size}",
                        b.len()
                    )));
                }
            }
            got += n as u64;
        }
        Ok::<_, HarnessError>(Instant::now())
    });
    let payload = vec![0xa5u8; size];
    let mut sent = 0u64;
    while sent < messages {
        let k = batch.min((messages - sent) as usize);
        let msgs = (0..k).map(|_| Msg::bytes(dst, payload.clone())).collect();
        tx.send(msgs).await?;
        sent += k as u64;
    }
    let end = receiver
        .await
        .map_err(|e| HarnessError::Violation(format!("receiver panicked: {e}")))??;
    let secs = (end - start).as_secs_f64();
    let msgs_per_s = messages as f64 / secs;
    Ok(ThroughputRow {
        chunnels,
        msg_size: size,
        msgs_per_s,
        gbits_per_s: msgs_per_s * size as f64 * 8.0 / 1e9,
    })
}

/// Every measurement of every trial.
#[derive(Debug, Clone, Default)]
pub struct OverheadRun {
    pub trials: Vec<Vec<ThroughputRow>>,
}

impl OverheadRun {
    /// Median throughput per (chunnels, size).
    pub fn rows(&self) -> Vec<ThroughputRow> {
        let mut all: BTreeMap<(usize, usize), Vec<ThroughputRow>> = BTreeMap::new();
        for r in self.trials.iter().flatten() {
            all.entry((r.chunnels, r.msg_size)).or_default().push(*r);
        }
        all.into_values()
            .map(|mut v| {
                v.sort_by(|a, b| a.msgs_per_s.total_cmp(&b.msgs_per_s));
                v[(v.len() - 1) / 2]
            })
            .collect()
    }

    /// Median over trials of the loss against the same trial's zero-chunnel
    /// rate. Pairing within a trial cancels slow machine drift.
    pub fn overhead(&self, chunnels: usize, size: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .trials
            .iter()
            .filter_map(|t| overhead(t, chunnels, size))
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[(v.len() - 1) / 2])
    }
}

/// Runs every (chunnels, size) once per trial. The chunnel order rotates
/// between trials so no configuration always runs first.
pub async fn run_trials(cfg: &OverheadConfig) -> Result<OverheadRun> {
    // warm allocator and caches
    measure(0, 64, cfg.messages / 10 + 1, cfg.batch).await?;
    let mut out = OverheadRun::default();
    for t in 0..cfg.trials.max(1) {
        let mut order = cfg.chunnels.clone();
        if !order.is_empty() {
            let k = t % order.len();
            order.rotate_left(k);
        }
        let mut rows = Vec::new();
        for &size in &cfg.sizes {
            for &n in &order {
                rows.push(measure(n, size, cfg.messages, cfg.batch).await?);
            }
        }
        out.trials.push(rows);
    }
    Ok(out)
}

/// Median throughput per (chunnels, size).
pub async fn run(cfg: &OverheadConfig) -> Result<Vec<ThroughputRow>> {
    Ok(run_trials(cfg).await?.rows())
}

/// Fractional throughput loss of `chunnels` no-ops against none.
pub fn overhead(rows: &[ThroughputRow], chunnels: usize, size: usize) -> Option<f64> {
    let rate = |n| {
        rows.iter()
            .find(|r| r.chunnels == n && r.msg_size == size)
            .map(|r| r.msgs_per_s)
    };
    Some(1.0 - rate(chunnels)? / rate(0)?)
}

pub fn to_csv(rows: &[ThroughputRow]) -> String {
    let mut out = String::from(THROUGHPUT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.0},{:.4}",
            r.chunnels, r.msg_size, r.msgs_per_s, r.gbits_per_s
        );
    }
    out
}
