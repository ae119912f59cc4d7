//! Runtime replacement of chunnel implementations.

mod handle;
mod slot;
pub mod twopc;

pub use handle::{ReconfigHandle, Registration, DEFAULT_BARRIER_TIMEOUT};
pub use slot::{SelectSlot, SwapMechanism};
