//! Capability matching, nonces and the point-to-point negotiation protocol.

mod capability;
mod compat;
mod nonce;

pub use capability::{by_universe, Capability, MatchMode, UniverseMap};
pub use compat::{check_compat, stacks_compatible, Agreed, CompatChoice};
pub use nonce::{decode_nonce, encode_nonce, fingerprint, Fingerprint, Nonce};
mod session;

pub use session::{
    client_negotiate, server_negotiate, Connection, Listener, NegotiatedStack, Negotiator, Role,
    ZeroRttCache, DEFAULT_REPLY_TIMEOUT,
};
