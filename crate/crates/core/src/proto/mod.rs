//! Framing, canonical encodings and the reliable control channel.

pub mod frame;
pub mod offer;
pub(crate) mod wire;

pub use frame::{Frame, Header, Tag, HEADER_LEN};
pub use offer::{decode_stack, encode_entries, encode_stack, OfferPayload};
pub mod mux;

pub use mux::{ControlChannel, Mux, MuxStats, ReliableConfig, SessionConn};
