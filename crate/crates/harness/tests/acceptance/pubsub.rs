use chunnel_harness::pubsub_demo::{run, PubsubConfig, Scenario};
use std::time::Duration;

use crate::{ensure, simulated};

pub fn transition() -> Result<String, String> {
    let rt = simulated();
    let mut early = 0;
    for seed in 0..20 {
        let cfg = PubsubConfig {
            scenario: Scenario::SecondReceiver,
            per_phase: 100,
            interarrival: Duration::from_millis(25),
            groups: 5,
            seed,
        };
        // run() already fails on reordering, duplicates, loss or a wrong epoch count
        let r = rt
            .block_on(run(&cfg))
            .map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(r.sent == 200 && r.deliveries.len() == 200, || {
            format!(
                "seed {seed}: {} of {} delivered",
                r.deliveries.len(),
                r.sent
            )
        })?;
        ensure(
            r.committed == 1 && r.final_epochs.iter().all(|e| *e == Some(2)),
            || {
                format!(
                    "seed {seed}: {} commits, epochs {:?}",
                    r.committed, r.final_epochs
                )
            },
        )?;
        early += r.old_stack_after_join;
    }
    Ok(format!(
        "20 of 20 seeds: one epoch bump, per-group order, exactly once; {early} post-join messages rode the original stack"
    ))
}
