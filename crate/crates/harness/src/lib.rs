//! Workloads, checkers and experiment drivers for the dpmkv stores.

pub mod bench;
pub mod crash;
pub mod deploy;
pub mod gc;
pub mod micro;
pub mod scan;
pub mod survive;
pub mod workload;

pub use bench::{isolation_stress, run_bench, Bench, IsolationVerdict, RunReport};
pub use crash::{crash_sweep, SweepVerdict};
pub use deploy::{Deployment, StoreOpts};
pub use workload::{KeyChooser, Mix, WorkloadSpec};
