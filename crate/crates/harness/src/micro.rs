//! Uncontended round-trip counts per operation.

use anyhow::{anyhow, Result};
use dpmkv::fabric::{LinkClass, SimConfig};
use dpmkv::stamp::stamp;
use dpmkv::{KvStore, StoreKind};

use crate::deploy::{Deployment, StoreOpts};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RttRow {
    pub store: StoreKind,
    pub read: u64,
    pub write: u64,
    /// Put with three-way replication.
    pub write_rep: u64,
    /// Bytes moved between the metadata server and DPMs (always zero for
    /// stores without one).
    pub ms_dpm_bytes: u64,
}

impl RttRow {
    pub const CSV_HEADER: [&'static str; 5] = ["store", "r_rtt", "w_rtt", "w_rtt_rep", "ms_dpm_bytes"];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.store.to_string(),
            self.read.to_string(),
            self.write.to_string(),
            self.write_rep.to_string(),
            self.ms_dpm_bytes.to_string(),
        ]
    }
}

/// Critical-path rounds of one get and one put issued by a lone client
/// after the key has been created and written once.
fn measure(kind: StoreKind, replication: usize, value_size: u64) -> Result<(u64, u64, u64)> {
    let mut opts = StoreOpts::new(kind);
    opts.replication = replication;
    let dep = Deployment::new(opts, SimConfig::with_devices(3), 16);
    let key = b"micro-k1".to_vec();
    let c = dep.client(0);
    let k = key.clone();
    dep.sim
        .block_on(async move {
            c.create(&k, value_size).await?;
            c.put(&k, &stamp(&k, 1, value_size as usize)).await
        })?
        .map_err(|e| anyhow!("{kind}: setup: {e}"))?;

    let c = dep.client(0);
    let k = key.clone();
    let put = dep
        .sim
        .spawn_with_result(async move { c.put(&k, &stamp(&k, 2, value_size as usize)).await });
    dep.sim.run()?;
    put.take().unwrap().map_err(|e| anyhow!("{kind}: put: {e}"))?;
    let w = dep.sim.task_rtts(put.task());

    let c = dep.client(0);
    let get = dep.sim.spawn_with_result(async move { c.get(&key).await });
    dep.sim.run()?;
    get.take().unwrap().map_err(|e| anyhow!("{kind}: get: {e}"))?;
    let r = dep.sim.task_rtts(get.task());
    Ok((r, w, dep.sim.meter().link_bytes(LinkClass::MsDpm)))
}

/// One row per store: read, write and replicated-write rounds.
pub fn rtt_table(value_size: u64) -> Result<Vec<RttRow>> {
    StoreKind::ALL
        .into_iter()
        .map(|kind| {
            let (read, write, b1) = measure(kind, 1, value_size)?;
            let (_, write_rep, b3) = measure(kind, 3, value_size)?;
            Ok(RttRow {
                store: kind,
                read,
                write,
                write_rep,
                ms_dpm_bytes: b1 + b3,
            })
        })
        .collect()
}
