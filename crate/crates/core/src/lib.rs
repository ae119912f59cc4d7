//! Composable, negotiable, runtime-reconfigurable connection stacks.

pub mod chunnel;
pub mod chunnels;
pub mod datapath;
pub mod error;
pub mod negotiate;
pub mod proto;
pub mod pubsub;
pub mod reconfig;
pub mod rendezvous;
pub mod stack;
pub mod transport;

pub use chunnel::{Accepts, Chunnel, ChunnelRef, Lower, Produces, ReconfigClass, WrapContext};
pub use datapath::{
    recv_one, Conn, Data, DataType, Datapath, Endpoint, Msg, OrderTag, Record, TransferState,
};
pub use error::{Error, LayerId, Result};
pub use stack::{make_stack, select, CandidateStack, Instance, Layer, SelectNode, StackSpec};
