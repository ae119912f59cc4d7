//! Command-line flags and the optional `key = value` config file.
//!
//! Flags override the file. Keys use the flag names, with `-` or `_`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chunnel::reconfig::SwapMechanism;
use clap::{Args, Parser, Subcommand};

use crate::error::{HarnessError, Result};
use crate::pubsub_demo::Scenario;

#[derive(Debug, Parser)]
#[command(
    name = "chunnel",
    version,
    about = "Chunnel example applications and benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Request/response echo over a negotiated stack.
    Echo,
    /// Sharded key-value store with a YCSB-B-like workload.
    Kv,
    /// Throughput with 0..5 no-op chunnels.
    BenchOverhead,
    /// Latency around a runtime swap, locked or barrier.
    BenchReconfig,
    /// Pub/sub ordering transition when a second receiver joins.
    PubsubDemo,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// client, server, or local (both ends in-process on the simulated network)
    #[arg(long, global = true)]
    pub role: Option<String>,
    /// UDP address: the listen address for a server, the server's for a client
    #[arg(long, global = true)]
    pub addr: Option<String>,
    /// Named stack preset
    #[arg(long, global = true)]
    pub stack: Option<String>,
    /// Stack preset for the server side of a local run
    #[arg(long, global = true)]
    pub server_stack: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Offered load, requests per second
    #[arg(long, global = true)]
    pub rate: Option<f64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub msg_size: Option<usize>,
    #[arg(long, global = true)]
    pub chunnels: Option<usize>,
    /// locked or barrier
    #[arg(long, global = true)]
    pub mechanism: Option<String>,
    #[arg(long, global = true)]
    pub trigger_reconfigure_after: Option<u64>,
    #[arg(long, global = true)]
    pub csv_out: Option<PathBuf>,
    /// key = value file; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Messages or requests to send
    #[arg(long, global = true)]
    pub count: Option<u64>,
    #[arg(long, global = true)]
    pub duration_ms: Option<u64>,
    #[arg(long, global = true)]
    pub keys: Option<usize>,
    #[arg(long, global = true)]
    pub read_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub value_size: Option<usize>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Pub/sub demo: single, second (default) or incompatible
    #[arg(long, global = true)]
    pub scenario: Option<String>,
}

impl Flags {
    /// The flags that were given, as config-file pairs.
    pub fn pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("role", self.role.clone());
        put("addr", self.addr.clone());
        put("stack", self.stack.clone());
        put("server_stack", self.server_stack.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("rate", self.rate.map(|v| v.to_string()));
        put("threads", self.threads.map(|v| v.to_string()));
        put("msg_size", self.msg_size.map(|v| v.to_string()));
        put("chunnels", self.chunnels.map(|v| v.to_string()));
        put("mechanism", self.mechanism.clone());
        put(
            "trigger_reconfigure_after",
            self.trigger_reconfigure_after.map(|v| v.to_string()),
        );
        put(
            "csv_out",
            self.csv_out.as_ref().map(|p| p.display().to_string()),
        );
        put("count", self.count.map(|v| v.to_string()));
        put("duration_ms", self.duration_ms.map(|v| v.to_string()));
        put("keys", self.keys.map(|v| v.to_string()));
        put("read_fraction", self.read_fraction.map(|v| v.to_string()));
        put("value_size", self.value_size.map(|v| v.to_string()));
        put("trials", self.trials.map(|v| v.to_string()));
        put("scenario", self.scenario.clone());
        m
    }

    pub fn settings(&self) -> Result<Settings> {
        let mut map = match &self.config {
            Some(p) => read_config_file(p)?,
            None => BTreeMap::new(),
        };
        map.extend(self.pairs());
        Settings::from_map(&map)
    }
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
        m.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
    /// Both ends in one process on the simulated network.
    Local,
}

impl FromStr for Role {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "client" => Ok(Role::Client),
            "server" => Ok(Role::Server),
            "local" | "both" => Ok(Role::Local),
            o => Err(HarnessError::Config(format!("unknown role {o:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub role: Role,
    pub addr: Option<SocketAddr>,
    pub stack: Option<String>,
    pub server_stack: Option<String>,
    pub seed: u64,
    pub rate: f64,
    pub threads: usize,
    pub msg_size: usize,
    pub chunnels: Option<usize>,
    pub mechanism: SwapMechanism,
    pub trigger_reconfigure_after: Option<u64>,
    pub csv_out: Option<PathBuf>,
    pub count: Option<u64>,
    pub duration_ms: Option<u64>,
    pub keys: usize,
    pub read_fraction: f64,
    pub value_size: usize,
    pub trials: usize,
    pub scenario: Scenario,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            role: Role::Local,
            addr: None,
            stack: None,
            server_stack: None,
            seed: 1,
            rate: 20_000.0,
            threads: 8,
            msg_size: 64,
            chunnels: None,
            mechanism: SwapMechanism::Barrier,
            trigger_reconfigure_after: None,
            csv_out: None,
            count: None,
            duration_ms: None,
            keys: 1000,
            read_fraction: 0.95,
            value_size: 132,
            trials: 1,
            scenario: Scenario::SecondReceiver,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("bad value for {key}: {v:?}")))
}

impl Settings {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Settings> {
        let mut s = Settings::default();
        for (k, v) in map {
            match k.as_str() {
                "role" => s.role = v.parse()?,
                "addr" => s.addr = Some(parse(k, v)?),
                "stack" => s.stack = Some(v.clone()),
                "server_stack" => s.server_stack = Some(v.clone()),
                "seed" => s.seed = parse(k, v)?,
                "rate" => s.rate = parse(k, v)?,
                "threads" => s.threads = parse(k, v)?,
                "msg_size" => s.msg_size = parse(k, v)?,
                "chunnels" => s.chunnels = Some(parse(k, v)?),
                "mechanism" => {
                    s.mechanism = v
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("unknown mechanism {v:?}")))?
                }
                "trigger_reconfigure_after" => s.trigger_reconfigure_after = Some(parse(k, v)?),
                "csv_out" => s.csv_out = Some(PathBuf::from(v)),
                "count" => s.count = Some(parse(k, v)?),
                "duration_ms" => s.duration_ms = Some(parse(k, v)?),
                "keys" => s.keys = parse(k, v)?,
                "read_fraction" => s.read_fraction = parse(k, v)?,
                "value_size" => s.value_size = parse(k, v)?,
                "trials" => s.trials = parse(k, v)?,
                "scenario" => {
                    s.scenario = match v.as_str() {
                        "single" => Scenario::SingleReceiver,
                        "second" => Scenario::SecondReceiver,
                        "incompatible" => Scenario::IncompatibleReceiver,
                        o => return Err(HarnessError::Config(format!("unknown scenario {o:?}"))),
                    }
                }
                other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
            }
        }
        if !(0.0..=1.0).contains(&s.read_fraction) {
            return Err(HarnessError::Config(
                "read_fraction must be in [0, 1]".into(),
            ));
        }
        if s.threads == 0 {
            return Err(HarnessError::Config("threads must be positive".into()));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_parses_with_comments_and_dashes() {
        let m = parse_config("# c\n\nmsg-size = 128\n seed=4 \n").unwrap();
        assert_eq!(m["msg_size"], "128");
        assert_eq!(m["seed"], "4");
        assert!(parse_config("nonsense").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = std::env::temp_dir().join(format!("chunnel-cfg-{}", std::process::id()));
        std::fs::write(&dir, "seed = 4\nthreads = 2\nmechanism = locked\n").unwrap();
        let cli = Cli::try_parse_from([
            "chunnel",
            "echo",
            "--config",
            dir.to_str().unwrap(),
            "--seed",
            "9",
        ])
        .unwrap();
        let s = cli.flags.settings().unwrap();
        std::fs::remove_file(&dir).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.threads, 2);
        assert_eq!(s.mechanism, SwapMechanism::Locked);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let m: BTreeMap<_, _> = [("bogus".to_string(), "1".to_string())].into();
        assert!(Settings::from_map(&m).is_err());
        let m: BTreeMap<_, _> = [("threads".to_string(), "x".to_string())].into();
        assert!(Settings::from_map(&m).is_err());
        let m: BTreeMap<_, _> = [("read_fraction".to_string(), "1.5".to_string())].into();
        assert!(Settings::from_map(&m).is_err());
    }
}
