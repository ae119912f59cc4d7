//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the criteria execute in order and report uniformly.
//! `cargo test --test acceptance -- 3 7` runs only criteria 3 and 7.

mod agreement;
mod negotiation;
mod perf;
mod pubsub;
mod wire;

use std::time::Instant;

type Check = fn() -> Result<String, String>;

const CRITERIA: [(u32, &str, Check); 9] = [
    (
        1,
        "negotiation matches brute-force oracle",
        negotiation::soundness,
    ),
    (
        2,
        "one-RTT, zero-RTT and fallback",
        negotiation::round_trips,
    ),
    (
        3,
        "reconfiguration safety under swaps",
        agreement::swap_safety,
    ),
    (4, "multilateral 2PC agreement", agreement::two_phase_commit),
    (5, "rendezvous linearizability", agreement::rendezvous),
    (6, "no-op chunnel overhead", perf::overhead),
    (7, "locked vs barrier trade-off", perf::mechanisms),
    (8, "pub/sub ordering transition", pubsub::transition),
    (9, "wire conformance", wire::conformance),
];

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let r = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {n} PASS ({secs:.1} s) {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL ({secs:.1} s) {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Paused-clock runtime for simulated-network criteria.
pub fn simulated() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .expect("runtime")
}

/// Real-clock runtime with up to `workers` threads.
pub fn real(workers: usize) -> tokio::runtime::Runtime {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers.clamp(1, cores))
        .enable_all()
        .build()
        .expect("runtime")
}

/// `Err` with `msg` unless `cond`.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
