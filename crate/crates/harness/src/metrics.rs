//! Latency samples, per-epoch percentile reports and small statistics.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use tokio::time::Instant;

pub const EPOCH: Duration = Duration::from_millis(100);
pub const LATENCY_HEADER: &str = "epoch_ms,p5_us,p25_us,p50_us,p75_us,p95_us,count";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    /// Issue time, from the start of the run.
    pub at: Duration,
    pub latency: Duration,
}

/// Thread-safe sample sink.
#[derive(Debug)]
pub struct Recorder {
    start: Instant,
    samples: Mutex<Vec<Sample>>,
}

impl Recorder {
    pub fn new(start: Instant) -> Self {
        Recorder {
            start,
            samples: Mutex::new(Vec::new()),
        }
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn record(&self, issued: Instant, done: Instant) {
        let s = Sample {
            at: issued.saturating_duration_since(self.start),
            latency: done.saturating_duration_since(issued),
        };
        self.samples.lock().unwrap().push(s);
    }

    pub fn samples(&self) -> Vec<Sample> {
        let mut v = self.samples.lock().unwrap().clone();
        v.sort_by_key(|s| s.at);
        v
    }
}

/// Nearest-rank percentile of a sorted slice.
pub fn percentile<T: Copy>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn median(v: &[Duration]) -> Option<Duration> {
    let mut s = v.to_vec();
    s.sort();
    percentile(&s, 50.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub epoch_ms: u64,
    pub p5: Duration,
    pub p25: Duration,
    pub p50: Duration,
    pub p75: Duration,
    pub p95: Duration,
    pub count: usize,
}

impl Row {
    fn of(epoch_ms: u64, mut lat: Vec<Duration>) -> Option<Row> {
        lat.sort();
        Some(Row {
            epoch_ms,
            p5: percentile(&lat, 5.0)?,
            p25: percentile(&lat, 25.0)?,
            p50: percentile(&lat, 50.0)?,
            p75: percentile(&lat, 75.0)?,
            p95: percentile(&lat, 95.0)?,
            count: lat.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub epoch: Duration,
    /// Only epochs that saw requests.
    pub rows: Vec<Row>,
    pub total: Option<Row>,
}

fn us(d: Duration) -> String {
    format!("{:.3}", d.as_nanos() as f64 / 1000.0)
}

impl LatencyReport {
    pub fn from_samples(samples: &[Sample], epoch: Duration) -> Self {
        let mut buckets: std::collections::BTreeMap<u64, Vec<Duration>> = Default::default();
        for s in samples {
            let e = (s.at.as_nanos() / epoch.as_nanos()) as u64;
            buckets.entry(e).or_default().push(s.latency);
        }
        let rows = buckets
            .into_iter()
            .filter_map(|(e, lat)| Row::of(e * epoch.as_millis() as u64, lat))
            .collect();
        let total = Row::of(0, samples.iter().map(|s| s.latency).collect());
        LatencyReport { epoch, rows, total }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LATENCY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch_ms,
                us(r.p5),
                us(r.p25),
                us(r.p50),
                us(r.p75),
                us(r.p95),
                r.count
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let total = 2f64.powi(n as i32);
    (wins..=n).map(|k| binomial(n, k)).sum::<f64>() / total
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(us: u64) -> Duration {
        Duration::from_micros(us)
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<u32> = (1..=100).collect();
        assert_eq!(percentile(&v, 5.0), Some(5));
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 95.0), Some(95));
        assert_eq!(percentile(&[7], 5.0), Some(7));
        assert_eq!(percentile::<u32>(&[], 50.0), None);
    }

    #[test]
    fn report_buckets_by_issue_time() {
        let samples: Vec<Sample> = (0..300)
            .map(|i| Sample {
                at: Duration::from_millis(i),
                latency: d(i % 100 + 1),
            })
            .collect();
        let r = LatencyReport::from_samples(&samples, EPOCH);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[1].epoch_ms, 100);
        assert_eq!(r.rows[1].count, 100);
        assert_eq!(r.rows[1].p50, d(50));
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(LATENCY_HEADER));
        assert_eq!(
            lines.next(),
            Some("0,5.000,25.000,50.000,75.000,95.000,100")
        );
    }

    #[test]
    fn empty_report() {
        let r = LatencyReport::from_samples(&[], EPOCH);
        assert!(r.is_empty());
        assert_eq!(r.to_csv(), format!("{LATENCY_HEADER}\n"));
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(9, 10) - 11.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p(10, 10) - 1.0 / 1024.0).abs() < 1e-12);
        assert!(sign_test_p(8, 10) > 0.05);
        assert_eq!(sign_test_p(0, 10), 1.0);
    }
}
