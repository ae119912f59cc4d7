//! Relative performance: no-op overhead and the locked/barrier trade-off.

use chunnel_harness::bench_overhead::{self, OverheadConfig, SIZES};
use chunnel_harness::bench_reconfig::{paired_trial, ReconfigBenchConfig};
use chunnel_harness::metrics::sign_test_p;

use crate::{ensure, real};

pub fn overhead() -> Result<String, String> {
    let cfg = OverheadConfig::default();
    ensure(cfg.trials == 10, || "expected a median of 10 trials".into())?;
    let run = real(1)
        .block_on(bench_overhead::run_trials(&cfg))
        .map_err(|e| e.to_string())?;
    let o = |n, size| {
        run.overhead(n, size)
            .ok_or(format!("no row for {n} x {size} B"))
    };
    let (small, large) = (o(5, 64)?, o(5, 1460)?);
    ensure(small <= 0.30, || {
        format!("5 no-ops at 64 B cost {:.1}%", small * 100.0)
    })?;
    ensure(large <= 0.10, || {
        format!("5 no-ops at 1460 B cost {:.1}%", large * 100.0)
    })?;
    for size in SIZES {
        let (one, five) = (o(1, size)?, o(5, size)?);
        ensure(one <= five, || {
            format!(
                "at {size} B one no-op costs {:.1}% but five {:.1}%",
                one * 100.0,
                five * 100.0
            )
        })?;
    }
    let per_size: Vec<String> = SIZES
        .iter()
        .map(|&s| format!("{s} B {:.1}%", o(5, s).unwrap_or(f64::NAN) * 100.0))
        .collect();
    Ok(format!("5-chunnel overhead {}", per_size.join(", ")))
}

pub fn mechanisms() -> Result<String, String> {
    let base = ReconfigBenchConfig {
        requests_per_thread: 2500,
        swap_after: Some(10_000),
        ..ReconfigBenchConfig::default()
    };
    ensure(base.threads == 8, || "expected 8 threads".into())?;
    let rt = real(base.threads);
    // one discarded pair so the first trial does not pay for cold caches
    rt.block_on(paired_trial(&base, 1))
        .map_err(|e| format!("warm-up: {e}"))?;
    let (mut steady, mut transient) = (0, 0);
    let mut detail = Vec::new();
    const TRIALS: usize = 10;
    for i in 0..TRIALS {
        let t = rt
            .block_on(paired_trial(&base, 16))
            .map_err(|e| format!("trial {i}: {e}"))?;
        let (lt, bt) = (
            t.locked
                .transient_median
                .ok_or("locked run had no transient")?,
            t.barrier
                .transient_median
                .ok_or("barrier run had no transient")?,
        );
        steady += usize::from(t.barrier.steady_median <= t.locked.steady_median);
        transient += usize::from(bt >= lt);
        detail.push(format!(
            "{:.1}/{:.1}",
            t.locked.steady_median.as_secs_f64() * 1e6,
            t.barrier.steady_median.as_secs_f64() * 1e6
        ));
    }
    let (ps, pt) = (sign_test_p(steady, TRIALS), sign_test_p(transient, TRIALS));
    ensure(ps < 0.05, || {
        format!("barrier steady median lower in only {steady}/{TRIALS} (p = {ps:.3}); locked/barrier us: {}", detail.join(" "))
    })?;
    ensure(pt < 0.05, || {
        format!("barrier transient median higher in only {transient}/{TRIALS} (p = {pt:.3})")
    })?;
    Ok(format!(
        "barrier steady <= locked in {steady}/{TRIALS} (p = {ps:.4}), barrier transient >= locked in {transient}/{TRIALS} (p = {pt:.4}); steady medians locked/barrier us: {}",
        detail.join(" ")
    ))
}
