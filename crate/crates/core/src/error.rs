use std::fmt;

/// Identifies a layer of a stack by its position (0 = top) and chunnel name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerId {
    pub index: usize,
    pub name: String,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} ({})", self.index, self.name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("type mismatch between layer {upper} and layer {lower}")]
    TypeMismatch { upper: usize, lower: usize },
    #[error("bottom layer cannot bootstrap a connection")]
    NoBootstrapLayer,
    #[error("empty stack")]
    EmptyStack,
    #[error("invalid candidate: {0}")]
    InvalidCandidate(String),
    #[error("{layer}: initialization failed: {reason}")]
    InitFailure { layer: LayerId, reason: String },
    #[error("{layer}: {reason}")]
    Layer { layer: String, reason: String },
    #[error("connection closed")]
    ConnectionClosed,

    #[error("address in use: {0}")]
    AddressInUse(String),
    #[error("payload too large: {0} bytes")]
    PayloadTooLarge(usize),

    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("malformed offer: {0}")]
    MalformedOffer(String),
    #[error("malformed nonce: {0}")]
    MalformedNonce(String),
    #[error("peer unreachable")]
    PeerUnreachable,

    #[error("no compatible stack")]
    NoCompatibleStack,
    #[error("negotiation rejected: {0}")]
    NegotiationRejected(String),
    #[error("capability configuration error: {0}")]
    CapabilityConfig(String),

    #[error("rendezvous store unavailable")]
    StoreUnavailable,
    #[error("not joined")]
    NotJoined,
    #[error("reconfiguration aborted: {0}")]
    Aborted(String),
    #[error("concurrent transition won the epoch")]
    CasConflict,
    #[error("barrier timed out waiting for registered threads")]
    BarrierTimeout,
    #[error("reconfiguration mechanism mismatch: {0}")]
    WrongMechanism(String),

    #[error("decode error: {0}")]
    Decode(String),
    #[error("record key is empty")]
    EmptyKey,
    #[error("ordering violation: {0}")]
    OrderingViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn layer(layer: impl Into<String>, reason: impl fmt::Display) -> Self {
        Error::Layer {
            layer: layer.into(),
            reason: reason.to_string(),
        }
    }
}
