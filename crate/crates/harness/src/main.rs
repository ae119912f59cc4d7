use std::process::ExitCode;
use std::time::Duration;

use chunnel::negotiate::Negotiator;
use chunnel::proto::Mux;
use chunnel::transport::UdpTransport;
use chunnel::Endpoint;
use clap::Parser;
use tracing_subscriber::EnvFilter;

use chunnel_harness::bench_overhead::{self, OverheadConfig};
use chunnel_harness::bench_reconfig::{self, ReconfigBenchConfig};
use chunnel_harness::config::{Cli, Command, Role, Settings};
use chunnel_harness::echo::{self, EchoConfig};
use chunnel_harness::kv::{self, KvConfig};
use chunnel_harness::pubsub_demo::{self, PubsubConfig};
use chunnel_harness::workload::{Limit, WorkloadConfig};
use chunnel_harness::{presets, HarnessError, Result};

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("CHUNNEL_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let res = cli.flags.settings().and_then(|s| {
        // a user-chosen --msg-size restricts the overhead sweep
        let sizes = cli.flags.msg_size.map(|m| vec![m]);
        dispatch(cli.cmd, &s, sizes)
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Simulated-network runs use virtual time, so they finish fast and are
/// reproducible.
fn simulated() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()?)
}

fn real(workers: usize) -> Result<tokio::runtime::Runtime> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers.clamp(1, cores))
        .enable_all()
        .build()?)
}

fn emit(s: &Settings, csv: &str) -> Result<()> {
    match &s.csv_out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dispatch(cmd: Command, s: &Settings, sizes: Option<Vec<usize>>) -> Result<()> {
    match cmd {
        Command::Echo => run_echo(s),
        Command::Kv => run_kv(s),
        Command::BenchOverhead => {
            let d = OverheadConfig::default();
            let cfg = OverheadConfig {
                chunnels: match s.chunnels {
                    Some(n) if n > 0 => vec![0, n],
                    Some(_) => vec![0],
                    None => d.chunnels,
                },
                sizes: sizes.unwrap_or(d.sizes),
                messages: s.count.unwrap_or(d.messages),
                trials: s.trials,
                ..d
            };
            let rows = real(1)?.block_on(bench_overhead::run(&cfg))?;
            emit(s, &bench_overhead::to_csv(&rows))
        }
        Command::BenchReconfig => {
            let d = ReconfigBenchConfig::default();
            let cfg = ReconfigBenchConfig {
                mechanism: s.mechanism,
                threads: s.threads,
                requests_per_thread: s.count.map_or(d.requests_per_thread, |c| c as u32),
                swap_after: s.trigger_reconfigure_after.or(d.swap_after),
                msg_size: s.msg_size,
                ..d
            };
            let run = real(s.threads)?.block_on(bench_reconfig::run(&cfg))?;
            eprintln!(
                "{:?}: steady median {:?}, transient median {:?} over {} requests, spike localized: {}",
                run.mechanism,
                run.steady_median,
                run.transient_median,
                run.transient_count,
                run.spike_localized
            );
            emit(s, &run.report.to_csv())
        }
        Command::PubsubDemo => {
            let cfg = PubsubConfig {
                scenario: s.scenario,
                per_phase: s.count.unwrap_or(100),
                seed: s.seed,
                ..PubsubConfig::default()
            };
            let r = simulated()?.block_on(pubsub_demo::run(&cfg))?;
            let mut out = String::from("receiver,epoch,group,seq,index\n");
            for d in &r.deliveries {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    d.receiver, d.epoch, d.group, d.seq, d.index
                ));
            }
            for e in &r.events {
                eprintln!("{e}");
            }
            emit(s, &out)
        }
    }
}

fn run_echo(s: &Settings) -> Result<()> {
    let stack = s.stack.clone().unwrap_or_else(|| "echo".into());
    let messages = s.count.unwrap_or(100);
    let need_addr = || {
        s.addr
            .ok_or_else(|| HarnessError::Config("--addr is required".into()))
    };
    match s.role {
        Role::Local => {
            let cfg = EchoConfig {
                messages,
                msg_size: s.msg_size,
                trigger_reconfigure_after: s.trigger_reconfigure_after,
                server_stack: s.server_stack.clone().unwrap_or_else(|| stack.clone()),
                client_stack: stack,
            };
            let r = simulated()?.block_on(echo::run_local(&cfg))?;
            println!("{r}");
            Ok(())
        }
        Role::Server => {
            let addr = need_addr()?;
            let trigger = s.trigger_reconfigure_after;
            real(1)?.block_on(async move {
                let spec = presets::echo(&stack, UdpTransport::new(addr).into())?;
                let listener = Negotiator::new(Mux::bind_udp(addr).await?, spec).listen();
                eprintln!("listening on {addr}");
                loop {
                    let conn = listener.accept().await?;
                    tracing::info!(peer = %conn.peer(), "accepted");
                    tokio::spawn(async move {
                        if let Err(e) = echo::serve(conn, trigger).await {
                            tracing::warn!("echo connection failed: {e}");
                        }
                    });
                }
            })
        }
        Role::Client => {
            let server = need_addr()?;
            let local = if server.is_ipv4() {
                "0.0.0.0:0"
            } else {
                "[::]:0"
            };
            let local = local.parse().expect("literal address");
            real(1)?.block_on(async move {
                let spec = presets::echo(&stack, UdpTransport::new(local).into())?;
                let neg = Negotiator::new(Mux::bind_udp(local).await?, spec);
                let conn = tokio::time::timeout(
                    Duration::from_secs(10),
                    neg.connect(Endpoint::from(server)),
                )
                .await
                .map_err(|_| HarnessError::Violation(format!("{server} did not answer")))??;
                let r = echo::client(&conn, messages, s.msg_size).await?;
                println!("{r}");
                Ok(())
            })
        }
    }
}

fn run_kv(s: &Settings) -> Result<()> {
    if s.role != Role::Local {
        return Err(HarnessError::Config(
            "kv runs every endpoint on the simulated network; use --role local".into(),
        ));
    }
    let limit = match (s.duration_ms, s.count) {
        (Some(ms), _) => Limit::Duration(Duration::from_millis(ms)),
        (None, Some(n)) => Limit::Count(n),
        (None, None) => WorkloadConfig::default().limit,
    };
    let stack = s.stack.clone().unwrap_or_else(|| "kv".into());
    let cfg = KvConfig {
        workload: WorkloadConfig {
            rate: s.rate,
            read_fraction: s.read_fraction,
            keys: s.keys,
            value_size: s.value_size,
            limit,
            seed: s.seed,
        },
        connections: s.threads,
        server_stack: s.server_stack.clone().unwrap_or_else(|| stack.clone()),
        client_stack: stack,
        ..KvConfig::default()
    };
    let r = simulated()?.block_on(kv::run(&cfg))?;
    eprintln!(
        "negotiated {}; loaded {} keys, {} requests, {} reads checked",
        r.mode.label(),
        r.loaded,
        r.requests,
        r.gets_checked
    );
    emit(s, &r.report.to_csv())
}
