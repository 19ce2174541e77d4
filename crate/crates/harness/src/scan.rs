//! Parameter scans: scalability, metadata cache size and load balancing.

use std::collections::{HashSet, VecDeque};

use anyhow::{anyhow, Result};
use dpmkv::fabric::{LinkClass, SimConfig};
use dpmkv::stamp::stamp;
use dpmkv::{KvStore, StoreKind};

use crate::bench::{run_bench, Bench, RunReport};
use crate::deploy::{bench_capacity, Client, Deployment, StoreOpts};
use crate::workload::WorkloadSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Cns,
    Dpms,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cns" => Ok(Axis::Cns),
            "dpms" => Ok(Axis::Dpms),
            _ => Err(format!("unknown axis '{s}' (expected cns or dpms)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScanPoint {
    pub x: u16,
    /// Throughput of every seed, in seed order.
    pub runs: Vec<f64>,
    pub reports: Vec<RunReport>,
}

impl ScanPoint {
    pub fn median(&self) -> f64 {
        median(&self.runs)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Runs `base` at every point of `axis`, once per seed.
pub fn scalability_scan(
    opts: StoreOpts,
    base: &WorkloadSpec,
    axis: Axis,
    points: &[u16],
    seeds: &[u64],
) -> Result<Vec<ScanPoint>> {
    points
        .iter()
        .map(|&x| {
            let mut reports = Vec::new();
            for &seed in seeds {
                let mut spec = base.clone();
                spec.seed = seed;
                match axis {
                    Axis::Cns => spec.cns = x,
                    Axis::Dpms => spec.dpms = x,
                }
                reports.push(run_bench(opts, &spec)?);
            }
            Ok(ScanPoint {
                x,
                runs: reports.iter().map(RunReport::throughput).collect(),
                reports,
            })
        })
        .collect()
}

/// Hit rate of a FIFO cache of `capacity` entries fed `stream`, counted
/// over accesses at positions `from..`. A miss inserts the key.
pub fn fifo_hits(stream: &[u64], capacity: usize, from: usize) -> (u64, u64) {
    let mut held = HashSet::new();
    let mut order = VecDeque::new();
    let (mut hits, mut total) = (0, 0);
    for (i, k) in stream.iter().enumerate() {
        let hit = held.contains(k);
        if !hit && capacity > 0 {
            if held.len() == capacity {
                let out = order.pop_front().unwrap();
                held.remove(&out);
            }
            held.insert(*k);
            order.push_back(*k);
        }
        if i >= from {
            total += 1;
            hits += hit as u64;
        }
    }
    (hits, total)
}

#[derive(Clone, Debug)]
pub struct CachePoint {
    pub pct: u32,
    pub report: RunReport,
    /// Hit rate of a standalone FIFO model run on the same accesses.
    pub oracle_hit_rate: f64,
}

impl CachePoint {
    /// Metadata server lookups per data operation.
    pub fn lookups_per_op(&self) -> f64 {
        self.report.counters.get("sep.lookups").copied().unwrap_or(0) as f64 / self.report.ops.max(1) as f64
    }

    pub const CSV_HEADER: [&'static str; 6] = [
        "cache_pct",
        "throughput",
        "hit_rate",
        "oracle_hit_rate",
        "lookups_per_op",
        "ops",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.pct.to_string(),
            format!("{:.4}", self.report.throughput()),
            format!("{:.4}", self.report.cache_hit_rate()),
            format!("{:.4}", self.oracle_hit_rate),
            format!("{:.4}", self.lookups_per_op()),
            self.report.ops.to_string(),
        ]
    }
}

/// Sep throughput and cache behaviour for each metadata cache size.
pub fn cache_scan(opts: StoreOpts, spec: &WorkloadSpec, pcts: &[u32]) -> Result<Vec<CachePoint>> {
    pcts.iter()
        .map(|&pct| {
            let mut o = opts;
            o.cache_pct = pct;
            let b = Bench::new(o, spec.clone())?;
            b.load()?;
            let report = b.measure()?;
            let cap = (spec.keys as usize * pct as usize).div_ceil(100);
            let measured = (spec.ops / spec.tasks()) as usize * spec.threads as usize;
            let (mut hits, mut total) = (0, 0);
            for stream in b.access.borrow().iter() {
                let (h, t) = fifo_hits(stream, cap, stream.len() - measured);
                hits += h;
                total += t;
            }
            Ok(CachePoint {
                pct,
                report,
                oracle_hit_rate: hits as f64 / total.max(1) as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LbReport {
    pub load_balance: bool,
    pub device_bytes: Vec<u64>,
    pub ms_dpm_bytes: u64,
}

impl LbReport {
    /// Busiest over least busy device.
    pub fn ratio(&self) -> f64 {
        let max = self.device_bytes.iter().copied().max().unwrap_or(0);
        let min = self.device_bytes.iter().copied().min().unwrap_or(0);
        if max == 0 {
            1.0
        } else if min == 0 {
            f64::INFINITY
        } else {
            max as f64 / min as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LbScenario {
    /// Gets of each of A and B.
    pub reads: u64,
    /// Puts of C.
    pub writes: u64,
    pub threads: u16,
    pub value_size: u64,
    pub seed: u64,
}

impl Default for LbScenario {
    fn default() -> Self {
        LbScenario {
            reads: 4000,
            writes: 4000,
            threads: 8,
            value_size: 1024,
            seed: 1,
        }
    }
}

/// One compute node, three DPMs, sep store. A (one copy) and B (two
/// copies) are read heavily, then C is created and updated heavily.
pub fn lb_demo(scenario: LbScenario, load_balance: bool) -> Result<LbReport> {
    let mut opts = StoreOpts::new(StoreKind::Sep);
    opts.load_balance = load_balance;
    let config = SimConfig {
        devices: 3,
        device_capacity: 32 << 20,
        seed: scenario.seed,
        capacity: bench_capacity(),
        record_log: false,
        ..SimConfig::default()
    };
    let dep = Deployment::new(opts, config, 3);
    let Client::Sep(c) = dep.client(0) else { unreachable!() };
    let size = scenario.value_size;
    let c2 = c.clone();
    dep.sim
        .block_on(async move {
            c2.create_with(b"A", size, 1).await?;
            c2.create_with(b"B", size, 2).await
        })?
        .map_err(|e| anyhow!("create: {e}"))?;
    let per = scenario.threads as u64;
    for t in 0..per {
        let c = c.clone();
        let n = scenario.reads * 2 / per;
        dep.sim.spawn(async move {
            for i in 0..n {
                let key: &[u8] = if (i + t) % 2 == 0 { b"A" } else { b"B" };
                c.get(key).await.expect("read of A or B");
            }
        });
    }
    dep.sim.run()?;
    let c2 = c.clone();
    dep.sim
        .block_on(async move { c2.create_with(b"C", size, 1).await })?
        .map_err(|e| anyhow!("create C: {e}"))?;
    for t in 0..per {
        let c = c.clone();
        let n = scenario.writes / per;
        dep.sim.spawn(async move {
            for i in 0..n {
                let g = (t * n + i + 1) as u32;
                c.put(b"C", &stamp(b"C", g, size as usize)).await.expect("write of C");
            }
        });
    }
    dep.sim.run()?;
    let m = dep.sim.meter();
    Ok(LbReport {
        load_balance,
        device_bytes: (0..3).map(|d| m.device_bytes(d)).collect(),
        ms_dpm_bytes: m.link_bytes(LinkClass::MsDpm),
    })
}
