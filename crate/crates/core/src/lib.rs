//! Crash-consistent key-value stores over simulated disaggregated
//! persistent memory.

pub mod alloc;
pub mod api;
pub mod cache;
pub mod central;
pub mod direct;
pub mod fabric;
pub mod registry;
pub mod rpc;
pub mod sep;
pub mod stamp;

pub use api::{Key, KvStore, StoreError, StoreKind};
