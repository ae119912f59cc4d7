//! Library chunnels.

pub mod noop;
pub mod ordering;
pub mod reliability;
pub mod serialize;
pub mod shard;
pub mod tag;

pub use noop::Noop;
pub use ordering::{OrderMode, Ordering, Reorder};
pub use reliability::{Reliability, ReliabilityStats};
pub use serialize::{Format, Serialize};
pub use shard::{fnv1a64, Shard, ShardMap, ShardMode, ShardRole};
pub use tag::{Stamp, TagChunnel};
