//! Example applications and benchmarks over chunnel stacks.

pub mod config;
pub mod error;
pub mod metrics;
pub mod workload;

pub use error::{HarnessError, Result};
pub mod bench_overhead;
pub mod bench_reconfig;
pub mod echo;
pub mod kv;
pub mod loopback;
pub mod presets;
pub mod pubsub_demo;
pub mod swap_safety;
