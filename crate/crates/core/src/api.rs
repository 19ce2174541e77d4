//! Interface shared by all stores.

use std::fmt;
use std::str::FromStr;

use crate::fabric::{DeviceId, FabricError};

pub type Key = Vec<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StoreKind {
    DirectLock,
    DirectCrc,
    Central,
    Sep,
}

impl StoreKind {
    pub const ALL: [StoreKind; 4] = [
        StoreKind::DirectLock,
        StoreKind::DirectCrc,
        StoreKind::Central,
        StoreKind::Sep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StoreKind::DirectLock => "direct-lock",
            StoreKind::DirectCrc => "direct-crc",
            StoreKind::Central => "central",
            StoreKind::Sep => "sep",
        }
    }
}

impl fmt::Display for StoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown store '{s}' (expected direct-lock, direct-crc, central or sep)"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("key already exists")]
    KeyExists,
    #[error("key not found")]
    KeyNotFound,
    #[error("value of {len} bytes exceeds entry size {size}")]
    ValueTooLarge { len: usize, size: u64 },
    #[error("out of space")]
    OutOfSpace,
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("both spaces of an entry on device {0} are corrupt")]
    BothSpacesCorrupt(DeviceId),
    #[error("read aborted after timeout")]
    ReadTimeout,
    #[error("malformed message: {0}")]
    Protocol(String),
}

/// One client's handle to a store. Handles are cheap to clone and are used
/// from simulated tasks.
#[allow(async_fn_in_trait)]
pub trait KvStore: Clone + 'static {
    fn kind(&self) -> StoreKind;

    async fn create(&self, key: &[u8], size: u64) -> Result<(), StoreError>;

    async fn put(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError>;

    async fn get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError>;

    async fn del(&self, key: &[u8]) -> Result<(), StoreError>;
}

/// Commit mark for `value` under `key`: the value's first word, which for
/// stamped values identifies the generation.
pub fn commit_mark(key: &[u8], value: &[u8]) -> crate::fabric::CommitMark {
    let mut w = [0u8; 8];
    let n = value.len().min(8);
    w[..n].copy_from_slice(&value[..n]);
    crate::fabric::CommitMark {
        key: key.to_vec(),
        stamp: u64::from_le_bytes(w),
    }
}
