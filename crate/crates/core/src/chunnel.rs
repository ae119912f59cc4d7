//! The transformer side of a chunnel.

use std::sync::Arc;

use async_trait::async_trait;

use crate::datapath::{Conn, DataType};
use crate::error::Result;
use crate::negotiate::Capability;

/// What a chunnel needs from the connection beneath it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accepts {
    /// Bootstraps from nothing; only valid at the bottom of a stack.
    Unit,
    Exactly(DataType),
    /// Any non-unit data type; the layer passes it through.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Produces {
    Exactly(DataType),
    SameAsInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconfigClass {
    /// Swappable with local coordination only.
    Unilateral,
    /// Swapping requires agreement from every connection endpoint.
    Multilateral,
}

/// The connection a chunnel wraps. `Unit` is the distinguished empty
/// connection that bootstrap layers start from.
#[derive(Clone)]
pub enum Lower {
    Unit,
    Conn(Conn),
}

impl Lower {
    pub fn data_type(&self) -> DataType {
        match self {
            Lower::Unit => DataType::Unit,
            Lower::Conn(c) => c.data_type(),
        }
    }
}

/// Per-instantiation information passed to every `connect_wrap`.
#[derive(Debug, Clone, Default)]
pub struct WrapContext {
    /// Stack generation this datapath is being built for. Bumped on every swap.
    pub epoch: u64,
    /// Negotiated nonce, for layers that forward it to other endpoints.
    pub nonce: Option<Vec<u8>>,
}

#[async_trait]
pub trait Chunnel: Send + Sync + 'static {
    fn name(&self) -> &str;

    fn accepts(&self) -> Accepts;

    fn produces(&self) -> Produces;

    /// Compatibility surface used by negotiation. Must be pure.
    fn capabilities(&self) -> Vec<Capability> {
        Vec::new()
    }

    fn reconfig_class(&self) -> ReconfigClass {
        if self.capabilities().is_empty() {
            ReconfigClass::Unilateral
        } else {
            ReconfigClass::Multilateral
        }
    }

    /// Build this layer's datapath on top of `lower`.
    async fn connect_wrap(&self, lower: Lower, cx: &WrapContext) -> Result<Conn>;
}

pub type ChunnelRef = Arc<dyn Chunnel>;
