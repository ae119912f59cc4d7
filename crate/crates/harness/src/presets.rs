//! Named stacks selectable with `--stack`.

use chunnel::chunnels::{
    Format, Reliability, Serialize, Shard, ShardMap, ShardMode, ShardRole, TagChunnel,
};
use chunnel::{make_stack, select, Layer, StackSpec};

use crate::error::{HarnessError, Result};

pub const ECHO_PRESETS: [&str; 2] = ["echo", "echo-unreliable"];

/// Echo stacks: a swappable stamping layer, optionally over reliability.
/// The two presets are incompatible, since only one has reliability.
pub fn echo(name: &str, bottom: Layer) -> Result<StackSpec> {
    let tags = select(TagChunnel::new("tag-a", 1), TagChunnel::new("tag-b", 2));
    let layers = match name {
        "echo" => vec![tags.into(), Reliability::new().into(), bottom],
        "echo-unreliable" => vec![tags.into(), bottom],
        o => {
            return Err(HarnessError::Config(format!(
                "unknown echo stack {o:?}; choose one of {ECHO_PRESETS:?}"
            )))
        }
    };
    Ok(make_stack(layers)?)
}

pub const KV_PRESETS: [&str; 3] = ["kv", "kv-client-shard", "kv-server-shard"];

/// Key-value stacks. `kv` offers both shard modes, client-side preferred.
pub fn kv(name: &str, role: ShardRole, map: &ShardMap, bottom: Layer) -> Result<StackSpec> {
    let shard = |m| -> Layer { Shard::new(m, role, map.clone()).into() };
    let top: Layer = match name {
        "kv" => select(shard(ShardMode::ClientSide), shard(ShardMode::ServerSide)).into(),
        "kv-client-shard" => shard(ShardMode::ClientSide),
        "kv-server-shard" => shard(ShardMode::ServerSide),
        o => {
            return Err(HarnessError::Config(format!(
                "unknown kv stack {o:?}; choose one of {KV_PRESETS:?}"
            )))
        }
    };
    Ok(make_stack(vec![
        top,
        Serialize::new(Format::A).into(),
        bottom,
    ])?)
}
