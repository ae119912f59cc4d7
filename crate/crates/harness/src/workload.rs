//! Seeded YCSB-B-like request generation: Poisson arrivals, mostly reads,
//! zipfian key popularity.

use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};

/// YCSB's default popularity skew.
pub const ZIPF_EXPONENT: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Limit {
    Count(u64),
    /// Requests whose arrival time falls inside the window.
    Duration(Duration),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    /// Requests per second.
    pub rate: f64,
    pub read_fraction: f64,
    pub keys: usize,
    pub value_size: usize,
    pub limit: Limit,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            rate: 20_000.0,
            read_fraction: 0.95,
            keys: 1000,
            value_size: 132,
            limit: Limit::Count(10_000),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Get,
    Put,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Op {
    /// Offset from the start of the run.
    pub at: Duration,
    pub kind: OpKind,
    pub key: String,
    /// Empty for reads.
    pub value: Vec<u8>,
}

pub fn key_name(i: usize) -> String {
    format!("user{i:08}")
}

impl WorkloadConfig {
    pub fn ops(&self) -> Vec<Op> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let gap = Exp::new(self.rate.max(f64::MIN_POSITIVE)).expect("positive rate");
        let zipf = Zipf::new(self.keys.max(1) as u64, ZIPF_EXPONENT).expect("valid zipf");
        let mut out = Vec::new();
        let mut t = 0.0f64;
        loop {
            if let Limit::Count(n) = self.limit {
                if out.len() as u64 >= n {
                    break;
                }
            }
            t += gap.sample(&mut rng);
            let at = Duration::from_secs_f64(t);
            if let Limit::Duration(d) = self.limit {
                if at >= d {
                    break;
                }
            }
            // zipf ranks start at 1
            let key = key_name(zipf.sample(&mut rng) as usize - 1);
            let (kind, value) = if rng.gen::<f64>() < self.read_fraction {
                (OpKind::Get, Vec::new())
            } else {
                let mut v = vec![0u8; self.value_size];
                rng.fill_bytes(&mut v);
                (OpKind::Put, v)
            };
            out.push(Op {
                at,
                kind,
                key,
                value,
            });
        }
        out
    }

    /// `n` PUTs cycling over every key, for populating the store.
    pub fn load_phase(&self, n: u64) -> Vec<Op> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x4c4f_4144);
        (0..n)
            .map(|i| {
                let mut v = vec![0u8; self.value_size];
                rng.fill_bytes(&mut v);
                Op {
                    at: Duration::ZERO,
                    kind: OpKind::Put,
                    key: key_name(i as usize % self.keys.max(1)),
                    value: v,
                }
            })
            .collect()
    }
}
