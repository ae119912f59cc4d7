//! Sharded key-value store on the simulated network.
//!
//! A canonical endpoint negotiates each client connection and hands it to
//! every shard. Depending on the negotiated shard mode, clients then send
//! straight to the owning shard or through the canonical endpoint, which
//! pays a forwarding penalty per message. Shards answer clients directly.
//!
//! Each key is owned by one connection, so a key's requests travel one
//! FIFO path and every GET must return the value of the latest PUT issued
//! before it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chunnel::chunnels::{fnv1a64, ShardMap, ShardMode, ShardRole};
use chunnel::negotiate::{Connection, Negotiator};
use chunnel::proto::Mux;
use chunnel::transport::{SimNet, SimNetConfig, SimTransport};
use chunnel::{recv_one, Datapath, Endpoint, Msg, Record};
use tokio::time::Instant;

use crate::error::{HarnessError, Result};
use crate::metrics::{LatencyReport, Recorder, EPOCH};
use crate::presets;
use crate::workload::{Op, OpKind, WorkloadConfig};

const GET: u8 = 0;
const PUT: u8 = 1;
const FOUND: u8 = 0;
const MISSING: u8 = 1;
const STORED: u8 = 2;

#[derive(Debug, Clone)]
pub struct KvConfig {
    pub workload: WorkloadConfig,
    /// PUTs issued before the measured run.
    pub load: u64,
    pub connections: usize,
    /// Connections are spread over this many client hosts.
    pub clients: usize,
    pub shards: usize,
    pub client_stack: String,
    pub server_stack: String,
    pub link_delay: Duration,
    /// Extra processing delay on everything the canonical endpoint sends.
    pub forward_penalty: Duration,
}

impl Default for KvConfig {
    fn default() -> Self {
        KvConfig {
            workload: WorkloadConfig::default(),
            load: 12_000,
            connections: 8,
            clients: 3,
            shards: 3,
            client_stack: "kv".into(),
            server_stack: "kv".into(),
            link_delay: Duration::from_micros(50),
            forward_penalty: Duration::from_micros(10),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KvReport {
    pub mode: ShardMode,
    pub report: LatencyReport,
    pub loaded: u64,
    pub gets_checked: u64,
    pub requests: u64,
}

fn canonical() -> Endpoint {
    Endpoint::sim(10, 6000)
}

fn shard_ep(i: usize) -> Endpoint {
    Endpoint::sim(11 + i as u16, 6000)
}

fn client_ep(conn: usize, clients: usize) -> Endpoint {
    Endpoint::sim(100 + (conn % clients.max(1)) as u16, 7000 + conn as u16)
}

pub fn encode_request(kind: OpKind, id: u64, value: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(9 + value.len());
    v.push(if kind == OpKind::Get { GET } else { PUT });
    v.extend_from_slice(&id.to_be_bytes());
    v.extend_from_slice(value);
    v
}

fn split(b: &[u8]) -> Result<(u8, u64, &[u8])> {
    if b.len() < 9 {
        return Err(HarnessError::Violation("short kv message".into()));
    }
    let id = u64::from_be_bytes(b[1..9].try_into().expect("8 bytes"));
    Ok((b[0], id, &b[9..]))
}

type Store = Arc<Mutex<HashMap<String, Vec<u8>>>>;

/// One shard's side of one client connection.
async fn shard_serve(conn: Connection, store: Store, reply_to: Endpoint) -> Result<()> {
    loop {
        let m = recv_one(&conn).await?;
        let (_, r) = m.into_record("kv")?;
        let (op, id, value) = split(&r.value)?;
        let mut reply = Vec::with_capacity(9 + 132);
        match op {
            PUT => {
                store
                    .lock()
                    .expect("store")
                    .insert(r.key.clone(), value.to_vec());
                reply.push(STORED);
                reply.extend_from_slice(&id.to_be_bytes());
            }
            GET => match store.lock().expect("store").get(&r.key) {
                Some(v) => {
                    reply.push(FOUND);
                    reply.extend_from_slice(&id.to_be_bytes());
                    reply.extend_from_slice(v);
                }
                None => {
                    reply.push(MISSING);
                    reply.extend_from_slice(&id.to_be_bytes());
                }
            },
            o => return Err(HarnessError::Violation(format!("unknown kv op {o}"))),
        }
        conn.send(vec![Msg::record(reply_to, Record::new(r.key, reply))])
            .await?;
    }
}

struct Pending {
    issued: Instant,
    /// For reads, the value that must come back.
    expect: Option<Vec<u8>>,
}

struct ClientConn {
    conn: Connection,
    pending: Mutex<HashMap<u64, Pending>>,
    /// Latest value issued per owned key.
    model: Mutex<HashMap<String, Vec<u8>>>,
    outstanding: tokio::sync::Notify,
    /// Set for the measured phase only.
    recorder: Mutex<Option<Arc<Recorder>>>,
}

impl ClientConn {
    async fn issue(&self, id: u64, op: &Op) -> Result<()> {
        let expect = match op.kind {
            OpKind::Get => Some(
                self.model
                    .lock()
                    .expect("model")
                    .get(&op.key)
                    .cloned()
                    .unwrap_or_default(),
            ),
            OpKind::Put => {
                self.model
                    .lock()
                    .expect("model")
                    .insert(op.key.clone(), op.value.clone());
                None
            }
        };
        self.pending.lock().expect("pending").insert(
            id,
            Pending {
                issued: Instant::now(),
                expect,
            },
        );
        let req = Record::new(op.key.clone(), encode_request(op.kind, id, &op.value));
        self.conn.send(vec![Msg::record(canonical(), req)]).await?;
        Ok(())
    }

    /// Match replies to requests until the connection fails.
    async fn receive(&self, checked: &Mutex<u64>) -> Result<()> {
        loop {
            let m = recv_one(&self.conn).await?;
            let (_, r) = m.into_record("kv")?;
            let (status, id, value) = split(&r.value)?;
            let p = self
                .pending
                .lock()
                .expect("pending")
                .remove(&id)
                .ok_or_else(|| HarnessError::Violation(format!("unexpected reply {id}")))?;
            if let Some(rec) = &*self.recorder.lock().expect("recorder") {
                rec.record(p.issued, Instant::now());
            }
            match (p.expect, status) {
                (None, STORED) => {}
                (Some(want), FOUND) if want == value => *checked.lock().expect("count") += 1,
                (Some(_), s) => {
                    return Err(HarnessError::Violation(format!(
                        "GET {:?} returned status {s} with a stale or wrong value",
                        r.key
                    )))
                }
                (None, s) => {
                    return Err(HarnessError::Violation(format!(
                        "PUT {:?} answered with status {s}",
                        r.key
                    )))
                }
            }
            self.outstanding.notify_waiters();
        }
    }

    async fn drained(&self, limit: Duration) -> Result<()> {
        tokio::time::timeout(limit, async {
            loop {
                let wake = self.outstanding.notified();
                if self.pending.lock().expect("pending").is_empty() {
                    return;
                }
                wake.await;
            }
        })
        .await
        .map_err(|_| HarnessError::Violation("requests left unanswered".into()))
    }
}

fn owner(key: &str, conns: usize) -> usize {
    (fnv1a64(key.as_bytes()) % conns as u64) as usize
}

pub async fn run(cfg: &KvConfig) -> Result<KvReport> {
    let conns = cfg.connections.max(1);
    let net = SimNet::new(SimNetConfig::lossless(cfg.link_delay));
    net.set_egress_delay(canonical(), cfg.forward_penalty);
    let map = ShardMap::new(canonical(), (0..cfg.shards).map(shard_ep).collect());
    let bottom = || SimTransport::new(net.clone(), vec![]).into();

    let front = Negotiator::new(
        Mux::bind_sim(&net, canonical())?,
        presets::kv(&cfg.server_stack, ShardRole::Canonical, &map, bottom())?,
    )
    .listen();
    let backends = (0..cfg.shards)
        .map(|i| {
            Ok(Negotiator::new(
                Mux::bind_sim(&net, shard_ep(i))?,
                presets::kv(&cfg.server_stack, ShardRole::Backend, &map, bottom())?,
            )
            .listen())
        })
        .collect::<Result<Vec<_>>>()?;
    let stores: Vec<Store> = (0..cfg.shards).map(|_| Store::default()).collect();

    let mut tasks = tokio::task::JoinSet::new();
    let mut clients = Vec::new();
    for c in 0..conns {
        let me = client_ep(c, cfg.clients);
        let conn = Negotiator::new(
            Mux::bind_sim(&net, me)?,
            presets::kv(&cfg.client_stack, ShardRole::Client, &map, bottom())?,
        )
        .connect(canonical())
        .await?;
        let f = front.accept().await?;
        for (i, l) in backends.iter().enumerate() {
            f.forward_to(shard_ep(i)).await?;
            let b = l.accept().await?;
            if b.conn_id() != conn.conn_id() {
                return Err(HarnessError::Violation(
                    "shard accepted a different connection".into(),
                ));
            }
            tasks.spawn(shard_serve(b, stores[i].clone(), me));
        }
        // the canonical endpoint forwards inside its receive path
        tasks.spawn(async move {
            recv_one(&f).await?;
            Ok(())
        });
        clients.push(Arc::new(ClientConn {
            conn,
            pending: Mutex::default(),
            model: Mutex::default(),
            outstanding: tokio::sync::Notify::new(),
            recorder: Mutex::new(None),
        }));
    }
    let mode = negotiated_mode(&clients[0].conn)?;
    tracing::info!(mode = mode.label(), "negotiated shard mode");

    let checked = Arc::new(Mutex::new(0u64));
    for c in &clients {
        let (c, checked) = (c.clone(), checked.clone());
        tasks.spawn(async move { c.receive(&checked).await });
    }

    let mut next_id = 0u64;
    let partition = |ops: Vec<Op>| {
        let mut per: Vec<Vec<Op>> = vec![Vec::new(); conns];
        for op in ops {
            per[owner(&op.key, conns)].push(op);
        }
        per
    };

    // load phase: closed loop per connection
    let load = partition(cfg.workload.load_phase(cfg.load));
    let mut loaders = tokio::task::JoinSet::new();
    for (c, ops) in clients.iter().zip(load) {
        let c = c.clone();
        let base = next_id;
        next_id += ops.len() as u64;
        loaders.spawn(async move {
            for (k, op) in ops.iter().enumerate() {
                c.issue(base + k as u64, op).await?;
                c.drained(Duration::from_secs(10)).await?;
            }
            Ok::<_, HarnessError>(())
        });
    }
    join_all(&mut loaders, &mut tasks).await?;
    let loaded_checked = *checked.lock().expect("count");

    // measured phase: open loop on the workload's schedule
    let ops = cfg.workload.ops();
    let requests = ops.len() as u64;
    let rec = Arc::new(Recorder::new(Instant::now()));
    for c in &clients {
        *c.recorder.lock().expect("recorder") = Some(rec.clone());
    }
    let start = rec.start();
    let mut runners = tokio::task::JoinSet::new();
    for (c, ops) in clients.iter().zip(partition(ops)) {
        let c = c.clone();
        let base = next_id;
        next_id += ops.len() as u64;
        runners.spawn(async move {
            for (k, op) in ops.iter().enumerate() {
                tokio::time::sleep_until(start + op.at).await;
                c.issue(base + k as u64, op).await?;
            }
            c.drained(Duration::from_secs(10)).await
        });
    }
    join_all(&mut runners, &mut tasks).await?;
    tasks.abort_all();

    let gets_checked = *checked.lock().expect("count") - loaded_checked;
    Ok(KvReport {
        mode,
        report: LatencyReport::from_samples(&rec.samples(), EPOCH),
        loaded: cfg.load,
        gets_checked,
        requests,
    })
}

fn negotiated_mode(conn: &Connection) -> Result<ShardMode> {
    let caps = conn.negotiated().local_caps;
    let shard = caps
        .iter()
        .find(|c| c.universe == "shard")
        .ok_or_else(|| HarnessError::Violation("stack has no shard layer".into()))?;
    for m in [ShardMode::ClientSide, ShardMode::ServerSide] {
        if shard.labels.contains(m.label()) {
            return Ok(m);
        }
    }
    Err(HarnessError::Violation("unknown shard mode".into()))
}

fn flatten(r: std::result::Result<Result<()>, tokio::task::JoinError>) -> Result<()> {
    r.map_err(|e| HarnessError::Violation(format!("task failed: {e}")))?
}

/// Wait for every `work` task, failing fast if one of them or a
/// `background` task fails.
async fn join_all(
    work: &mut tokio::task::JoinSet<Result<()>>,
    background: &mut tokio::task::JoinSet<Result<()>>,
) -> Result<()> {
    loop {
        tokio::select! {
            r = work.join_next() => match r {
                None => return Ok(()),
                Some(r) => flatten(r)?,
            },
            Some(r) = background.join_next() => flatten(r)?,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Limit;

    fn small(server_stack: &str) -> KvConfig {
        KvConfig {
            workload: WorkloadConfig {
                keys: 200,
                limit: Limit::Count(2000),
                ..Default::default()
            },
            load: 1200,
            server_stack: server_stack.into(),
            ..Default::default()
        }
    }

    #[tokio::test(start_paused = true)]
    async fn both_modes_serve_last_written_values() {
        for (stack, mode) in [
            ("kv", ShardMode::ClientSide),
            ("kv-server-shard", ShardMode::ServerSide),
        ] {
            let r = run(&small(stack)).await.unwrap();
            assert_eq!(r.mode, mode);
            assert_eq!(r.requests, 2000);
            assert_eq!(r.report.total.unwrap().count, 2000);
            assert!(r.gets_checked > 1800, "{}", r.gets_checked);
        }
    }

    #[tokio::test(start_paused = true)]
    async fn zero_duration_gives_an_empty_report() {
        let mut cfg = small("kv");
        cfg.workload.limit = Limit::Duration(Duration::ZERO);
        let r = run(&cfg).await.unwrap();
        assert!(r.report.is_empty());
        assert_eq!(r.requests, 0);
    }
}
