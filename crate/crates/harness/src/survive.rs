//! Permanent loss of DPMs after a replicated workload.

use std::cell::RefCell;
use std::collections::HashMap;

use anyhow::{anyhow, Result};
use dpmkv::fabric::{DeviceId, LinkClass, Sim, Survivors};
use dpmkv::sep::SepStore;
use dpmkv::stamp::{stamp_check, StampCheck};
use dpmkv::{KvStore, StoreKind};

use crate::bench::Bench;
use crate::deploy::{Store, StoreOpts};
use crate::workload::{key_name, Mix, WorkloadSpec};

/// Most single-copy pick sequences tried per sep chain.
const MAX_PICKS: usize = 256;

#[derive(Clone, Debug)]
pub struct SurvivalVerdict {
    pub store: StoreKind,
    pub killed: Vec<DeviceId>,
    pub keys: u64,
    /// Keys whose read matched their last commit.
    pub readable: u64,
    /// Chains rebuilt (sep only), counting every pick sequence.
    pub chains: u64,
    pub failures: Vec<String>,
    pub ms_dpm_bytes: u64,
}

impl SurvivalVerdict {
    pub fn passed(&self) -> bool {
        self.readable == self.keys && self.failures.is_empty()
    }
}

/// Spec used for the survivability run: four DPMs, a write-heavy mix.
pub fn survival_spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        keys: 2_000,
        value_size: 256,
        mix: Mix::A,
        ops: 16_000,
        warmup: 0,
        cns: 2,
        threads: 8,
        dpms: 4,
        seed,
        ..Default::default()
    }
}

/// Runs `spec` with three-way replication, kills `killed` for good and
/// checks every key against its last commit.
pub fn survive(kind: StoreKind, spec: &WorkloadSpec, killed: &[DeviceId]) -> Result<SurvivalVerdict> {
    let mut opts = StoreOpts::new(kind);
    opts.replication = 3;
    let bench = Bench::new(opts, spec.clone())?;
    bench.load()?;
    let report = bench.measure()?;
    if report.errors > 0 || !report.passed() {
        return Err(anyhow!("{kind}: workload itself failed: {:?}", report.violations));
    }
    let sim = bench.sim();
    let last: HashMap<Vec<u8>, u64> =
        sim.with_commits(|c| c.iter().map(|r| (r.mark.key.clone(), r.mark.stamp)).collect());
    for &d in killed {
        sim.crash_device(d, true, &Survivors::DurableOnly);
    }
    let mut v = SurvivalVerdict {
        store: kind,
        killed: killed.to_vec(),
        keys: spec.keys,
        readable: 0,
        chains: 0,
        failures: Vec::new(),
        ms_dpm_bytes: 0,
    };
    let reader = bench.dep.client(spec.cns);
    let keys = spec.keys;
    let got = sim.block_on(async move {
        let mut out = Vec::new();
        for k in 0..keys {
            out.push(reader.get(&key_name(k)).await);
        }
        out
    })?;
    for (k, r) in got.into_iter().enumerate() {
        let key = key_name(k as u64);
        let want = last.get(&key).copied().unwrap_or(0);
        match r {
            Ok(val) if first_word(&val) == want && matches!(stamp_check(&val), StampCheck::Consistent { .. }) => {
                v.readable += 1
            }
            Ok(val) => v
                .failures
                .push(format!("key {k}: read {:#x}, last commit {want:#x}", first_word(&val))),
            Err(e) => v.failures.push(format!("key {k}: {e}")),
        }
    }
    if let Store::Sep(s) = &bench.dep.store {
        for k in 0..keys {
            let key = key_name(k);
            let want = last.get(&key).copied().unwrap_or(0);
            match rebuild_all(sim, s, &key) {
                Ok((n, tail)) if tail == want => v.chains += n,
                Ok((_, tail)) => v
                    .failures
                    .push(format!("key {k}: chain ends at {tail:#x}, last commit {want:#x}")),
                Err(e) => v.failures.push(format!("key {k}: {e}")),
            }
        }
    }
    v.failures.truncate(16);
    v.ms_dpm_bytes = sim.meter().link_bytes(LinkClass::MsDpm);
    Ok(v)
}

fn first_word(v: &[u8]) -> u64 {
    let mut w = [0u8; 8];
    let n = v.len().min(8);
    w[..n].copy_from_slice(&v[..n]);
    u64::from_le_bytes(w)
}

/// Rebuilds the chain of `key` once for every way of picking one surviving
/// copy per version (up to `MAX_PICKS`). All rebuilds must agree. Returns
/// the number of rebuilds and the tail's first word.
fn rebuild_all(sim: &Sim, store: &SepStore, key: &[u8]) -> Result<(u64, u64), String> {
    let mut choice: Vec<usize> = Vec::new();
    let mut reference: Option<Vec<Vec<u8>>> = None;
    let mut n = 0;
    loop {
        let arity = RefCell::new(Vec::new());
        let chain = store.chain(key, |ver| {
            let live: Vec<_> = ver.copies.iter().copied().filter(|c| sim.is_alive(c.device)).collect();
            let mut a = arity.borrow_mut();
            let i = a.len();
            a.push(live.len());
            live.get(choice.get(i).copied().unwrap_or(0))
                .into_iter()
                .copied()
                .collect()
        })?;
        n += 1;
        match &reference {
            None => reference = Some(chain),
            Some(r) if *r != chain => return Err("chains differ between surviving copies".into()),
            Some(_) => {}
        }
        let arity = arity.into_inner();
        // Odometer over the per-version choices.
        choice.resize(arity.len(), 0);
        let mut i = 0;
        while i < arity.len() {
            choice[i] += 1;
            if choice[i] < arity[i] {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == arity.len() || n as usize >= MAX_PICKS {
            let tail = reference.unwrap().last().map(|p| first_word(p)).unwrap_or(0);
            return Ok((n, tail));
        }
    }
}
