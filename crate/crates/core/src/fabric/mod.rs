//! Simulated disaggregated persistent-memory fabric.
//!
//! Devices are passive byte arrays reached only through one-sided
//! operations submitted by tasks. A single-threaded scheduler decides how
//! concurrently issued operations interleave, either as seeded discrete-event
//! rounds or exhaustively.

pub mod device;
mod exec;
pub mod explore;
pub mod fault;
pub mod meter;
pub mod sync;
pub mod trace;

use std::fmt;

pub use device::{DpmImage, Health, Survivors, WORD};
pub use exec::{
    CommitMark, CommitRecord, CrashEvent, JoinHandle, LogEntry, OpKind, OpOutput, OpRequest, Port, Sim, TaskId,
};
pub use explore::{explore, explore_bounded, ExploreError, ExploreStats};
pub use fault::{CrashPoint, FaultPlan, FaultPlanParseError};
pub use meter::{LinkClass, Meter, Path, RoundClass};
pub use sync::{SimMutex, SimMutexGuard, SimRwLock, SimSemaphore, SimSemaphorePermit};

pub type DeviceId = u16;

/// Durability is tracked per connection. Every task gets its own; background
/// work posted by a task shares its parent's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Cn(u16),
    Coord,
    Ms,
    Dpm(DeviceId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Cn(i) => write!(f, "cn{i}"),
            Endpoint::Coord => f.write_str("coord"),
            Endpoint::Ms => f.write_str("ms"),
            Endpoint::Dpm(i) => write!(f, "dpm{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum FabricError {
    #[error("device {0} unavailable")]
    DeviceUnavailable(DeviceId),
    #[error("device {device}: range {address}+{length} out of bounds")]
    OutOfRange {
        device: DeviceId,
        address: u64,
        length: u64,
    },
    #[error("device {device}: misaligned CAS at {address}")]
    Misaligned { device: DeviceId, address: u64 },
    #[error("device {0} is permanently dead")]
    RecoverOnDead(DeviceId),
    #[error("no such device {0}")]
    NoSuchDevice(DeviceId),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("deadlock: {0} task(s) blocked with nothing in flight")]
    Deadlock(usize),
    #[error("step limit {0} reached")]
    StepLimit(u64),
    #[error("more than {0} schedules")]
    BoundExceeded(u64),
    #[error("task did not finish")]
    Unfinished,
}

/// Per-round service capacity of one endpoint's NIC. Zero means unlimited.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Nic {
    pub ops: u32,
    pub bytes: u64,
}

impl Nic {
    pub const UNLIMITED: Nic = Nic { ops: 0, bytes: 0 };

    pub fn new(ops: u32, bytes: u64) -> Self {
        Nic { ops, bytes }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capacity {
    pub cn: Nic,
    pub dpm: Nic,
    pub coord: Nic,
    pub ms: Nic,
}

impl Capacity {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn of(&self, endpoint: Endpoint) -> Nic {
        match endpoint {
            Endpoint::Cn(_) => self.cn,
            Endpoint::Dpm(_) => self.dpm,
            Endpoint::Coord => self.coord,
            Endpoint::Ms => self.ms,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub devices: u16,
    pub device_capacity: u64,
    pub seed: u64,
    pub capacity: Capacity,
    pub record_log: bool,
    /// Rounds (timed mode) or steps (exhaustive mode) before giving up.
    pub max_steps: u64,
    pub faults: FaultPlan,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            devices: 1,
            device_capacity: 1 << 20,
            seed: 0,
            capacity: Capacity::unlimited(),
            record_log: true,
            max_steps: 10_000_000,
            faults: FaultPlan::new(),
        }
    }
}

impl SimConfig {
    pub fn with_devices(devices: u16) -> Self {
        SimConfig {
            devices,
            ..Self::default()
        }
    }
}
