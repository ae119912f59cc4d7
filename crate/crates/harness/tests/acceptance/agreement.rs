//! Swap safety, two-phase commit agreement and rendezvous races.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use chunnel::chunnels::{Format, Serialize};
use chunnel::proto::Mux;
use chunnel::reconfig::twopc::{Decision, Hooks, MeshBus, TwoPcConfig, TwoPcNode};
use chunnel::reconfig::SwapMechanism;
use chunnel::rendezvous::{
    JoinMachine, JoinOutcome, KvStore, MemStore, Rendezvous, RendezvousEntry,
};
use chunnel::transport::{SimNet, SimNetConfig, SimTransport};
use chunnel::{make_stack, select, Endpoint, StackSpec};
use chunnel_harness::swap_safety::{self, SafetyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, real, simulated};

pub fn swap_safety() -> Result<String, String> {
    let t = Instant::now();
    let mut out = Vec::new();
    for mechanism in [SwapMechanism::Locked, SwapMechanism::Barrier] {
        let cfg = SafetyConfig {
            mechanism,
            ..SafetyConfig::default()
        };
        ensure(
            cfg.threads == 8 && cfg.per_thread == 10_000 && cfg.swaps == 50,
            || "defaults drifted from 8 x 10k with 50 swaps".into(),
        )?;
        let r = real(cfg.threads)
            .block_on(swap_safety::run(&cfg))
            .map_err(|e| format!("{mechanism:?}: {e}"))?;
        let expected = (cfg.threads as u64) * u64::from(cfg.per_thread);
        ensure(r.clean(expected) && r.swaps_done == cfg.swaps, || {
            format!("{mechanism:?}: {r:?}")
        })?;
        out.push(format!(
            "{mechanism:?} {} delivered, {} swaps, {} retransmits",
            r.delivered, r.swaps_done, r.retransmits
        ));
    }
    let took = t.elapsed();
    ensure(took < Duration::from_secs(300), || format!("took {took:?}"))?;
    Ok(format!("{}; 0 violations", out.join("; ")))
}

// ---- 2PC ----

/// Records what each participant voted and applied.
struct Probe {
    veto: bool,
    vetoed: Mutex<BTreeSet<u64>>,
    applied: Mutex<Vec<u64>>,
}

#[async_trait]
impl Hooks<()> for Probe {
    fn check(&self, _from: Endpoint, _target: &[u8]) -> Option<(Vec<u8>, ())> {
        if self.veto {
            None
        } else {
            Some((Vec::new(), ()))
        }
    }
    async fn commit(&self, pid: u64, _: ()) {
        self.applied.lock().unwrap().push(pid);
    }
}

fn record_veto(p: &Probe, decisions: &BTreeMap<u64, Decision>) {
    if p.veto {
        p.vetoed.lock().unwrap().extend(decisions.keys().copied());
    }
}

#[derive(Debug, Default)]
struct Tally {
    committed: usize,
    aborted: usize,
    vetoed: usize,
    timeouts: usize,
}

async fn one_run(seed: u64, t: &mut Tally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let loss = rng.gen_range(0.0..=0.3);
    let delay = Duration::from_millis(rng.gen_range(1..=5));
    let net = SimNet::new(
        SimNetConfig::lossless(delay)
            .traced(false)
            .loss(loss)
            .jitter(Duration::from_millis(2))
            .seed(seed),
    );
    let eps: Vec<Endpoint> = (1..=n as u16).map(|h| Endpoint::sim(h, 5000)).collect();
    let inject_timeout = rng.gen_bool(0.25);
    let concurrent = rng.gen_bool(0.25);
    let proposers: Vec<usize> = if concurrent { vec![0, n - 1] } else { vec![0] };
    let mut nodes = Vec::new();
    let mut probes = Vec::new();
    let mut muxes = Vec::new();
    for (i, ep) in eps.iter().enumerate() {
        let cfg = TwoPcConfig {
            vote_timeout: if inject_timeout && i == 0 {
                Duration::from_millis(rng.gen_range(1..=30))
            } else {
                TwoPcConfig::default().vote_timeout
            },
            ..TwoPcConfig::default()
        };
        let mux = Mux::bind_sim(&net, *ep).unwrap();
        let bus = MeshBus::new(mux.clone(), 7, cfg.retry);
        let probe = Arc::new(Probe {
            veto: !proposers.contains(&i) && rng.gen_bool(0.2),
            vetoed: Mutex::default(),
            applied: Mutex::default(),
        });
        let node = TwoPcNode::new(*ep, bus.clone(), probe.clone(), cfg);
        for p in eps.iter().filter(|p| *p != ep) {
            tokio::spawn(MeshBus::serve(bus.channel(*p), node.clone()));
        }
        nodes.push(node);
        probes.push(probe);
        muxes.push(mux);
    }
    let mut tasks = Vec::new();
    for &p in &proposers {
        let node = nodes[p].clone();
        let peers = eps.clone();
        tasks.push(tokio::spawn(async move {
            node.propose(&peers, b"target".to_vec(), |_votes| {
                Box::pin(async { Ok::<_, chunnel::Error>(()) })
            })
            .await
        }));
    }
    let mut outcomes = Vec::new();
    for task in tasks {
        outcomes.push(task.await.map_err(|e| e.to_string())?);
    }
    // long enough for persistent retries and participant decision timers
    tokio::time::sleep(Duration::from_secs(400)).await;

    let decisions: Vec<BTreeMap<u64, Decision>> = nodes.iter().map(|n| n.decisions()).collect();
    for (p, d) in probes.iter().zip(&decisions) {
        record_veto(p, d);
    }
    let pids: BTreeSet<u64> = decisions.iter().flat_map(|d| d.keys().copied()).collect();
    for pid in &pids {
        let seen: Vec<Decision> = decisions
            .iter()
            .filter_map(|d| d.get(pid).copied())
            .collect();
        let committed = seen.contains(&Decision::Committed);
        ensure(!(committed && seen.contains(&Decision::Aborted)), || {
            format!("pid {pid:#x}: split decision {seen:?} (n={n}, loss={loss:.2})")
        })?;
        let vetoed = probes
            .iter()
            .any(|p| p.vetoed.lock().unwrap().contains(pid));
        let applied = probes
            .iter()
            .filter(|p| p.applied.lock().unwrap().contains(pid))
            .count();
        if vetoed {
            t.vetoed += 1;
            ensure(!committed && applied == 0, || {
                format!("pid {pid:#x} vetoed yet applied")
            })?;
        }
        if committed {
            t.committed += 1;
            // every participant switched, exactly once
            ensure(applied == n - 1, || {
                format!("pid {pid:#x}: {applied} of {} peers applied", n - 1)
            })?;
        } else {
            t.aborted += 1;
            ensure(applied == 0, || format!("pid {pid:#x} aborted but applied"))?;
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        ensure(node.prepared().is_empty(), || {
            format!("node {i} still prepared")
        })?;
    }
    if inject_timeout && outcomes[0].is_err() {
        t.timeouts += 1;
    }
    drop(muxes);
    Ok(())
}

pub fn two_phase_commit() -> Result<String, String> {
    let rt = simulated();
    let mut t = Tally::default();
    for seed in 0..1000 {
        rt.block_on(one_run(seed, &mut t))
            .map_err(|e| format!("run {seed}: {e}"))?;
    }
    ensure(t.committed > 0 && t.vetoed > 0 && t.timeouts > 0, || {
        format!("weak coverage {t:?}")
    })?;
    Ok(format!(
        "1000 runs, {} proposals committed, {} aborted ({} vetoed, {} proposer timeouts); no split decisions",
        t.committed, t.aborted, t.vetoed, t.timeouts
    ))
}

// ---- rendezvous ----

const ADDR: &str = "acceptance/topic";

fn spec_either() -> StackSpec {
    make_stack(vec![
        select(Serialize::new(Format::A), Serialize::new(Format::B)).into(),
        SimTransport::new(SimNet::in_memory(), vec![]).into(),
    ])
    .unwrap()
}

fn spec_only(f: Format) -> StackSpec {
    make_stack(vec![
        Serialize::new(f).into(),
        SimTransport::new(SimNet::in_memory(), vec![]).into(),
    ])
    .unwrap()
}

async fn race(k: usize) -> Result<(), String> {
    let store = MemStore::new();
    let mut tasks = Vec::new();
    for _ in 0..k {
        let store: Arc<dyn KvStore> = store.clone();
        tasks.push(tokio::spawn(async move {
            Rendezvous::new(store).join(ADDR, &spec_either()).await
        }));
    }
    let mut outcomes = Vec::new();
    for t in tasks {
        outcomes.push(
            t.await
                .map_err(|e| e.to_string())?
                .map_err(|e| e.to_string())?,
        );
    }
    let won = outcomes
        .iter()
        .filter(|o| matches!(o, JoinOutcome::Won(_)))
        .count();
    ensure(won == 1, || format!("{won} winners"))?;
    let v = store
        .get(ADDR)
        .await
        .map_err(|e| e.to_string())?
        .ok_or("no entry")?;
    let e = RendezvousEntry::decode(&v.value).map_err(|e| e.to_string())?;
    ensure(e.count == k as u64, || {
        format!("count {} after {k} joins", e.count)
    })?;
    for o in &outcomes {
        let j = o.joined().ok_or("a joiner was refused")?;
        ensure(j.fingerprint() == e.fingerprint(), || {
            "fingerprint differs from the stored entry".into()
        })?;
    }
    Ok(())
}

/// Outcome of running the joiners one after another in `order`.
fn sequential(
    specs: &[StackSpec],
    order: &[usize],
) -> (BTreeMap<usize, JoinOutcome>, BTreeMap<String, Vec<u8>>) {
    let store = MemStore::new();
    let mut out = BTreeMap::new();
    for &i in order {
        let mut m = JoinMachine::new(ADDR, &specs[i]);
        let o = loop {
            if let Some(o) = m.step(&store).unwrap() {
                break o;
            }
        };
        out.insert(i, o);
    }
    (out, store.snapshot())
}

/// Depth-first over every interleaving of store operations. Each complete
/// schedule must equal the sequential run in its commit order.
fn explore(
    specs: &[StackSpec],
    store: &MemStore,
    machines: &[Option<JoinMachine>],
    done: &BTreeMap<usize, JoinOutcome>,
    commit_order: &[usize],
) -> Result<usize, String> {
    let live: Vec<usize> = (0..machines.len())
        .filter(|&i| machines[i].is_some())
        .collect();
    if live.is_empty() {
        let mut order = commit_order.to_vec();
        order.extend((0..specs.len()).filter(|i| !commit_order.contains(i)));
        let (want, final_state) = sequential(specs, &order);
        ensure(done == &want && store.snapshot() == final_state, || {
            format!("schedule with commit order {commit_order:?} is not linearizable")
        })?;
        return Ok(1);
    }
    let mut total = 0;
    for i in live {
        let fork = store.fork();
        let mut ms = machines.to_vec();
        let mut m = ms[i].take().unwrap();
        let before = fork.snapshot();
        let r = m.step(&fork).map_err(|e| e.to_string())?;
        let mut order = commit_order.to_vec();
        let mut d = done.clone();
        match r {
            Some(o) => {
                if fork.snapshot() != before {
                    order.push(i);
                }
                d.insert(i, o);
            }
            None => ms[i] = Some(m),
        }
        total += explore(specs, &fork, &ms, &d, &order)?;
    }
    Ok(total)
}

pub fn rendezvous() -> Result<String, String> {
    let rt = real(8);
    for round in 0..50 {
        rt.block_on(race(8))
            .map_err(|e| format!("K=8 round {round}: {e}"))?;
    }
    let mixes = [
        vec![spec_either(), spec_either(), spec_either()],
        vec![spec_only(Format::B), spec_either(), spec_only(Format::A)],
        vec![
            spec_only(Format::A),
            spec_only(Format::A),
            spec_only(Format::B),
        ],
    ];
    let mut schedules = 0;
    for specs in &mixes {
        let machines: Vec<_> = specs
            .iter()
            .map(|s| Some(JoinMachine::new(ADDR, s)))
            .collect();
        schedules += explore(specs, &MemStore::new(), &machines, &BTreeMap::new(), &[])?;
    }
    Ok(format!(
        "50 races of 8 joiners, one winner each; {schedules} K=3 interleavings match sequential runs"
    ))
}
