//! Closed-loop benchmark runs with built-in read checking.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::rc::Rc;

use anyhow::{bail, Context, Result};
use dpmkv::fabric::{LinkClass, Meter, Sim, SimConfig};
use dpmkv::stamp::{key_hash, stamp, stamp_check, StampCheck};
use dpmkv::{KvStore, StoreKind};

use crate::deploy::{bench_capacity, device_capacity, Client, Deployment, StoreOpts};
use crate::workload::{key_name, OpStream, WorkloadSpec};

/// Metered outcome of one run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub store: StoreKind,
    pub spec: WorkloadSpec,
    pub replication: usize,
    pub cache_pct: u32,
    pub ops: u64,
    pub writes: u64,
    pub errors: u64,
    /// Simulated rounds taken by the measured phase.
    pub rounds: u64,
    pub meter: Meter,
    pub counters: BTreeMap<String, u64>,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Handler-rounds spent at the coordinator or metadata server.
    pub handler_busy: u64,
    pub torn: u64,
    pub uncommitted: u64,
    /// First few offending reads, for diagnosis.
    pub violations: Vec<String>,
    pub device_bytes: Vec<u64>,
}

impl RunReport {
    /// Operations per simulated round.
    pub fn throughput(&self) -> f64 {
        if self.rounds == 0 {
            0.0
        } else {
            self.ops as f64 / self.rounds as f64
        }
    }

    fn per_op(&self, n: u64) -> f64 {
        if self.ops == 0 {
            0.0
        } else {
            n as f64 / self.ops as f64
        }
    }

    pub fn bytes_per_op(&self) -> f64 {
        self.per_op(self.meter.total_bytes())
    }

    pub fn link_bytes_per_op(&self, link: LinkClass) -> f64 {
        self.per_op(self.meter.link_bytes(link))
    }

    /// Payload-carrying bytes per operation, all links.
    pub fn data_bytes_per_op(&self) -> f64 {
        self.per_op(self.meter.total_data_bytes())
    }

    pub fn retries(&self) -> u64 {
        self.counters
            .iter()
            .filter(|(k, _)| k.ends_with("retries"))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn cache_hit_rate(&self) -> f64 {
        let n = self.cache_hits + self.cache_misses;
        if n == 0 {
            0.0
        } else {
            self.cache_hits as f64 / n as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.torn == 0 && self.uncommitted == 0
    }

    pub const CSV_HEADER: [&'static str; 26] = [
        "store",
        "workload",
        "cns",
        "dpms",
        "threads",
        "keys",
        "value_size",
        "zipf",
        "replication",
        "cache_pct",
        "seed",
        "ops",
        "errors",
        "rounds",
        "throughput",
        "bytes_per_op",
        "data_bytes_per_op",
        "cn_dpm_bytes",
        "cn_coord_bytes",
        "cn_ms_bytes",
        "coord_dpm_bytes",
        "ms_dpm_bytes",
        "dpm_bytes",
        "retries",
        "cache_hit_rate",
        "torn",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let s = &self.spec;
        let dpm = self
            .device_bytes
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(";");
        vec![
            self.store.to_string(),
            s.mix.to_string(),
            s.cns.to_string(),
            s.dpms.to_string(),
            s.threads.to_string(),
            s.keys.to_string(),
            s.value_size.to_string(),
            s.theta.to_string(),
            self.replication.to_string(),
            self.cache_pct.to_string(),
            s.seed.to_string(),
            self.ops.to_string(),
            self.errors.to_string(),
            self.rounds.to_string(),
            format!("{:.4}", self.throughput()),
            format!("{:.2}", self.bytes_per_op()),
            format!("{:.2}", self.data_bytes_per_op()),
            self.meter.link_bytes(LinkClass::CnDpm).to_string(),
            self.meter.link_bytes(LinkClass::CnCoord).to_string(),
            self.meter.link_bytes(LinkClass::CnMs).to_string(),
            self.meter.link_bytes(LinkClass::CoordDpm).to_string(),
            self.meter.link_bytes(LinkClass::MsDpm).to_string(),
            dpm,
            self.retries().to_string(),
            format!("{:.4}", self.cache_hit_rate()),
            (self.torn + self.uncommitted).to_string(),
        ]
    }
}

pub fn write_csv<W: Write>(out: W, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RunReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Checks every read: it must be one whole stamped value of the right key,
/// and that value's commit must already have happened.
struct Checker {
    sim: Sim,
    seen: usize,
    committed: HashSet<(Vec<u8>, u64)>,
    torn: u64,
    uncommitted: u64,
    violations: Vec<String>,
}

impl Checker {
    fn new(sim: &Sim) -> Self {
        Checker {
            sim: sim.clone(),
            seen: 0,
            committed: HashSet::new(),
            torn: 0,
            uncommitted: 0,
            violations: Vec::new(),
        }
    }

    fn note(&mut self, msg: String) {
        if self.violations.len() < 8 {
            self.violations.push(msg);
        }
    }

    fn check(&mut self, key: &[u8], value: &[u8]) {
        match stamp_check(value) {
            StampCheck::Torn { .. } => {
                self.torn += 1;
                self.note(format!("torn read of key {key:?} at round {}", self.sim.now()));
            }
            StampCheck::Consistent { generation: 0, .. } => {}
            StampCheck::Consistent {
                key_hash: h,
                generation,
            } => {
                if h != key_hash(key) {
                    self.torn += 1;
                    self.note(format!("key {key:?} returned another key's value (gen {generation})"));
                    return;
                }
                let first = u64::from_le_bytes(value[..8].try_into().unwrap());
                if !self.is_committed(key, first) {
                    self.uncommitted += 1;
                    self.note(format!("key {key:?} returned uncommitted gen {generation}"));
                }
            }
        }
    }

    fn is_committed(&mut self, key: &[u8], mark: u64) -> bool {
        let probe = (key.to_vec(), mark);
        if self.committed.contains(&probe) {
            return true;
        }
        let seen = self.seen;
        let fresh: Vec<(Vec<u8>, u64)> = self
            .sim
            .with_commits(|c| c[seen..].iter().map(|r| (r.mark.key.clone(), r.mark.stamp)).collect());
        self.seen += fresh.len();
        self.committed.extend(fresh);
        self.committed.contains(&probe)
    }
}

#[derive(Default)]
struct Tally {
    ops: u64,
    writes: u64,
    errors: u64,
}

/// Per-CN order in which keys were accessed, for cache oracles.
pub type AccessLog = Rc<RefCell<Vec<Vec<u64>>>>;

pub struct Bench {
    pub dep: Deployment,
    pub spec: WorkloadSpec,
    generations: Rc<RefCell<Vec<u32>>>,
    checker: Rc<RefCell<Checker>>,
    streams: Vec<Rc<RefCell<OpStream>>>,
    pub access: AccessLog,
}

pub fn sim_config(opts: &StoreOpts, spec: &WorkloadSpec) -> SimConfig {
    SimConfig {
        devices: spec.dpms,
        device_capacity: device_capacity(opts, spec.keys, spec.value_size, spec.dpms),
        seed: spec.seed,
        capacity: bench_capacity(),
        record_log: false,
        max_steps: u64::MAX,
        ..SimConfig::default()
    }
}

impl Bench {
    pub fn new(opts: StoreOpts, spec: WorkloadSpec) -> Result<Bench> {
        Self::with_config(opts, spec.clone(), sim_config(&opts, &spec))
    }

    pub fn with_config(opts: StoreOpts, spec: WorkloadSpec, config: SimConfig) -> Result<Bench> {
        if spec.value_size < 8 || !spec.value_size.is_multiple_of(8) {
            bail!("value size must be a positive multiple of 8");
        }
        if spec.cns == 0 || spec.threads == 0 || spec.keys == 0 {
            bail!("need at least one compute node, thread and key");
        }
        let dep = Deployment::new(opts, config, spec.keys);
        let checker = Rc::new(RefCell::new(Checker::new(&dep.sim)));
        let streams = (0..spec.tasks())
            .map(|t| Rc::new(RefCell::new(OpStream::new(&spec, t))))
            .collect();
        Ok(Bench {
            generations: Rc::new(RefCell::new(vec![0; spec.keys as usize])),
            access: Rc::new(RefCell::new(vec![Vec::new(); spec.cns as usize])),
            dep,
            spec,
            checker,
            streams,
        })
    }

    pub fn sim(&self) -> &Sim {
        &self.dep.sim
    }

    /// Creates every key. Loader compute nodes are numbered after the
    /// measured ones so that measured clients start with cold caches.
    pub fn load(&self) -> Result<()> {
        let loaders = self.spec.tasks().max(8);
        let size = self.spec.value_size;
        let failures = Rc::new(RefCell::new(Vec::new()));
        for t in 0..loaders {
            let cn = self.spec.cns + (t % self.spec.cns as u64) as u16;
            let c = self.dep.client(cn);
            let (keys, f) = (self.spec.keys, failures.clone());
            self.sim().spawn(async move {
                let mut k = t;
                while k < keys {
                    if let Err(e) = c.create(&key_name(k), size).await {
                        f.borrow_mut().push((k, e));
                    }
                    k += loaders;
                }
            });
        }
        self.sim().run().context("load phase")?;
        if let Some((k, e)) = failures.borrow().first() {
            bail!("create of key {k} failed: {e}");
        }
        Ok(())
    }

    /// Reads every key from every measured compute node.
    pub fn warm(&self) -> Result<()> {
        let keys = self.spec.keys;
        let threads = self.spec.threads as u64;
        for cn in 0..self.spec.cns {
            let c = self.dep.client(cn);
            for th in 0..threads {
                let (c, access) = (c.clone(), self.access.clone());
                self.sim().spawn(async move {
                    let mut k = th;
                    while k < keys {
                        access.borrow_mut()[cn as usize].push(k);
                        let _ = c.get(&key_name(k)).await;
                        k += threads;
                    }
                });
            }
        }
        self.sim().run().context("cache warm-up")?;
        Ok(())
    }

    /// Runs `per_task` operations on every task and waits for them.
    fn phase(&self, per_task: u64) -> Result<Tally> {
        let tally = Rc::new(RefCell::new(Tally::default()));
        let size = self.spec.value_size as usize;
        for cn in 0..self.spec.cns {
            let c = self.dep.client(cn);
            for th in 0..self.spec.threads {
                let t = cn as usize * self.spec.threads as usize + th as usize;
                let (c, stream) = (c.clone(), self.streams[t].clone());
                let (gens, checker, tally, access) = (
                    self.generations.clone(),
                    self.checker.clone(),
                    tally.clone(),
                    self.access.clone(),
                );
                self.sim().spawn(async move {
                    for _ in 0..per_task {
                        let op = stream.borrow_mut().next().unwrap();
                        let key = key_name(op.key);
                        access.borrow_mut()[cn as usize].push(op.key);
                        let res = if op.write {
                            let g = {
                                let mut g = gens.borrow_mut();
                                g[op.key as usize] += 1;
                                g[op.key as usize]
                            };
                            c.put(&key, &stamp(&key, g, size)).await
                        } else {
                            c.get(&key).await.map(|v| checker.borrow_mut().check(&key, &v))
                        };
                        let mut t = tally.borrow_mut();
                        t.ops += 1;
                        t.writes += op.write as u64;
                        t.errors += res.is_err() as u64;
                    }
                });
            }
        }
        self.sim().run().context("workload phase")?;
        Ok(Rc::try_unwrap(tally).ok().unwrap().into_inner())
    }

    fn cache_stats(&self) -> (u64, u64) {
        match &self.dep.store {
            crate::deploy::Store::Central(s) => s.cache_stats(),
            crate::deploy::Store::Sep(_) => (0..self.spec.cns)
                .map(|cn| match self.dep.client(cn) {
                    Client::Sep(c) => c.cache_stats(),
                    _ => unreachable!(),
                })
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1)),
            _ => (0, 0),
        }
    }

    fn handler_gauge(&self) -> u64 {
        self.sim().busy("coord.handlers") + self.sim().busy("ms.handlers")
    }

    /// Warm-up, then the measured phase.
    pub fn measure(&self) -> Result<RunReport> {
        let tasks = self.spec.tasks();
        if self.spec.warm_caches && self.dep.opts.kind == StoreKind::Sep {
            self.warm()?;
        }
        self.phase(self.spec.warmup / tasks)?;
        let m0 = self.sim().meter();
        let c0 = self.sim().counters();
        let t0 = self.sim().now();
        let (h0, mi0) = self.cache_stats();
        let b0 = self.handler_gauge();
        let tally = self.phase(self.spec.ops / tasks)?;
        let meter = self.sim().meter().since(&m0);
        let counters = self
            .sim()
            .counters()
            .into_iter()
            .map(|(k, v)| {
                let before = c0.get(&k).copied().unwrap_or(0);
                (k, v - before)
            })
            .filter(|(_, v)| *v > 0)
            .collect();
        let (h1, mi1) = self.cache_stats();
        let ch = self.checker.borrow();
        Ok(RunReport {
            store: self.dep.opts.kind,
            spec: self.spec.clone(),
            replication: self.dep.opts.replication,
            cache_pct: self.dep.opts.cache_pct,
            ops: tally.ops,
            writes: tally.writes,
            errors: tally.errors,
            rounds: self.sim().now() - t0,
            device_bytes: (0..self.spec.dpms).map(|d| meter.device_bytes(d)).collect(),
            meter,
            counters,
            cache_hits: h1 - h0,
            cache_misses: mi1 - mi0,
            handler_busy: self.handler_gauge() - b0,
            torn: ch.torn,
            uncommitted: ch.uncommitted,
            violations: ch.violations.clone(),
        })
    }
}

/// Loads the keys and runs the workload.
pub fn run_bench(opts: StoreOpts, spec: &WorkloadSpec) -> Result<RunReport> {
    let b = Bench::new(opts, spec.clone())?;
    b.load()?;
    b.measure()
}

/// Verdict of a read-committed stress run.
#[derive(Clone, Debug)]
pub struct IsolationVerdict {
    pub report: RunReport,
}

impl IsolationVerdict {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.errors == 0
    }
}

/// Runs `spec` and checks every read for torn or uncommitted values.
pub fn isolation_stress(opts: StoreOpts, spec: &WorkloadSpec) -> Result<IsolationVerdict> {
    let report = run_bench(opts, spec)?;
    Ok(IsolationVerdict { report })
}
