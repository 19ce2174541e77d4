//! Crash-point sweeps over a single put.
//!
//! A put of a new value over a committed old one is run once to learn its
//! sub-operations. It is then rerun from scratch once per crash point and
//! per choice of surviving unconfirmed sub-writes, followed by recovery and
//! a get. The get must return exactly the old or exactly the new value.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use anyhow::{anyhow, Result};
use dpmkv::fabric::{
    Capacity, CrashPoint, DeviceId, LinkClass, LogEntry, OpKind, Sim, SimConfig, SimError, Survivors, TaskId,
};
use dpmkv::stamp::{key_hash, stamp, stamp_check, StampCheck};
use dpmkv::{KvStore, StoreError, StoreKind};

use crate::deploy::{Deployment, Store, StoreOpts};

/// Crash target meaning "the coordinator or metadata server" rather than a
/// device.
pub const SERVER: DeviceId = DeviceId::MAX;

const KEY: &[u8] = b"crashkey";
const VALUE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Old,
    New,
}

#[derive(Clone, Debug)]
pub struct CrashCase {
    pub index: u64,
    pub kind: OpKind,
    pub target: Option<DeviceId>,
    pub survivors: String,
    pub outcome: Result<Outcome, String>,
    /// Whether the put's commit mark was recorded.
    pub committed: bool,
    /// Metadata server to DPM bytes over the whole run.
    pub ms_dpm_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct SweepVerdict {
    pub store: StoreKind,
    pub replication: usize,
    /// Sub-operations of the put, each one a crash point.
    pub points: Vec<LogEntry>,
    pub cases: Vec<CrashCase>,
}

impl SweepVerdict {
    pub fn violations(&self) -> impl Iterator<Item = &CrashCase> {
        self.cases.iter().filter(|c| c.outcome.is_err())
    }

    pub fn passed(&self) -> bool {
        self.violations().next().is_none() && !self.cases.is_empty()
    }

    pub fn ms_dpm_bytes(&self) -> u64 {
        self.cases.iter().map(|c| c.ms_dpm_bytes).sum()
    }

    pub fn count(&self, o: Outcome) -> usize {
        self.cases
            .iter()
            .filter(|c| c.outcome.as_ref().ok() == Some(&o))
            .count()
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "store",
        "replication",
        "op_index",
        "kind",
        "target",
        "survivors",
        "committed",
        "outcome",
    ];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.cases
            .iter()
            .map(|c| {
                vec![
                    self.store.to_string(),
                    self.replication.to_string(),
                    c.index.to_string(),
                    c.kind.as_str().to_string(),
                    match c.target {
                        Some(SERVER) => "server".into(),
                        Some(d) => format!("dpm{d}"),
                        None => "-".into(),
                    },
                    c.survivors.clone(),
                    c.committed.to_string(),
                    match &c.outcome {
                        Ok(o) => format!("{o:?}").to_lowercase(),
                        Err(e) => format!("violation: {e}"),
                    },
                ]
            })
            .collect()
    }
}

impl fmt::Display for SweepVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} N={}: {} crash points, {} cases, {} old, {} new, {} violations",
            self.store,
            self.replication,
            self.points.len(),
            self.cases.len(),
            self.count(Outcome::Old),
            self.count(Outcome::New),
            self.violations().count()
        )
    }
}

/// One scripted run: setup, then the put under test.
struct Run {
    dep: Deployment,
    base: u64,
    put: TaskId,
    put_ok: Rc<RefCell<Option<Result<(), StoreError>>>>,
}

fn new_value() -> Vec<u8> {
    stamp(KEY, 2, VALUE_SIZE)
}

fn old_value() -> Vec<u8> {
    stamp(KEY, 1, VALUE_SIZE)
}

fn config(opts: &StoreOpts) -> SimConfig {
    SimConfig {
        devices: 3.max(opts.replication as u16),
        device_capacity: 1 << 20,
        seed: 7,
        capacity: Capacity::unlimited(),
        record_log: true,
        max_steps: 1_000_000,
        ..SimConfig::default()
    }
}

/// Builds the store, commits the old value and starts the put of the new
/// one without running it.
fn start(opts: &StoreOpts, crash: Option<CrashPoint>) -> Result<Run> {
    let dep = Deployment::new(*opts, config(opts), 16);
    let c = dep.client(0);
    dep.sim
        .block_on(async move {
            c.create(KEY, VALUE_SIZE as u64).await?;
            c.put(KEY, &old_value()).await
        })?
        .map_err(|e| anyhow!("setup failed: {e}"))?;
    let base = dep.sim.op_index();
    if let Some(p) = crash {
        let store = dep.store.clone();
        dep.sim.on_crash(move |_, ev| {
            if ev.device == Some(SERVER) {
                match &store {
                    Store::Central(s) => s.crash_coordinator(),
                    Store::Sep(s) => s.fail_over(),
                    Store::Direct(_) => {}
                }
            }
        });
        dep.sim.add_fault(p);
    }
    let c = dep.client(0);
    let put_ok = Rc::new(RefCell::new(None));
    let slot = put_ok.clone();
    let put = dep.sim.spawn(async move {
        let r = c.put(KEY, &new_value()).await;
        *slot.borrow_mut() = Some(r);
    });
    Ok(Run { dep, base, put, put_ok })
}

/// Runs the put to completion without faults and returns its
/// sub-operations.
pub fn crash_points(opts: &StoreOpts) -> Result<Vec<LogEntry>> {
    let run = start(opts, None)?;
    run.dep.sim.run()?;
    Ok(run
        .dep
        .sim
        .log()
        .into_iter()
        .filter(|e| e.index >= run.base && e.task == run.put)
        .collect())
}

/// Finishes a faulted run: recovery, then the read and a follow-up write.
fn finish(
    run: Run,
    entry: &LogEntry,
    target: DeviceId,
    survivors: String,
) -> Result<(CrashCase, Vec<(dpmkv::fabric::ConnId, usize)>)> {
    let sim = &run.dep.sim;
    let ran = sim.run();
    let (case, pending) = settle(&run, sim, ran, entry, target, survivors)?;
    let case = CrashCase {
        ms_dpm_bytes: sim.meter().link_bytes(LinkClass::MsDpm),
        ..case
    };
    Ok((case, pending))
}

fn settle(
    run: &Run,
    sim: &Sim,
    ran: Result<(), SimError>,
    entry: &LogEntry,
    target: DeviceId,
    survivors: String,
) -> Result<(CrashCase, Vec<(dpmkv::fabric::ConnId, usize)>)> {
    let crashes = sim.crashes();
    let ev = crashes.first().cloned();
    let mut case = CrashCase {
        index: entry.index,
        kind: entry.kind,
        target: Some(target),
        survivors,
        outcome: Err(String::new()),
        committed: false,
        ms_dpm_bytes: 0,
    };
    let Some(ev) = ev else {
        case.outcome = Err("crash did not fire".into());
        return Ok((case, Vec::new()));
    };
    if let Err(e) = ran {
        case.outcome = Err(format!("put did not settle: {e}"));
        return Ok((case, ev.pending));
    }
    let device = (target != SERVER).then_some(target);
    if let Some(d) = device {
        sim.recover_device(d)?;
    }
    let store = run.dep.store.clone();
    let s2 = sim.clone();
    let recovered = sim.block_on(async move { store.recover(&s2, device).await })?;
    if let Err(e) = recovered {
        case.outcome = Err(format!("recovery failed: {e}"));
        return Ok((case, ev.pending));
    }
    let reader = run.dep.client(1);
    let got = sim.block_on(async move { reader.get(KEY).await });
    let new_mark = dpmkv::api::commit_mark(KEY, &new_value());
    case.committed = sim.with_commits(|c| c.iter().any(|r| r.mark == new_mark));
    let put_ok = matches!(*run.put_ok.borrow(), Some(Ok(())));
    case.outcome = match got {
        Err(e) => Err(format!("get did not finish: {e}")),
        Ok(Err(e)) => Err(format!("get failed: {e}")),
        Ok(Ok(v)) => classify(&v).and_then(|o| {
            if put_ok && o == Outcome::Old {
                return Err("completed put lost".into());
            }
            if strict_commit(&run.dep.opts) && (o == Outcome::New) != case.committed {
                return Err(format!("outcome {o:?} but commit recorded = {}", case.committed));
            }
            Ok(o)
        }),
    };
    if case.outcome.is_ok() {
        // The store must still work.
        let c = run.dep.client(1);
        let again = sim.block_on(async move {
            c.put(KEY, &stamp(KEY, 3, VALUE_SIZE)).await?;
            c.get(KEY).await
        });
        match again {
            Ok(Ok(v)) if v == stamp(KEY, 3, VALUE_SIZE) => {}
            Ok(Ok(v)) => case.outcome = Err(format!("follow-up read gen {:?}", stamp_check(&v).generation())),
            Ok(Err(e)) => case.outcome = Err(format!("follow-up failed: {e}")),
            Err(e) => case.outcome = Err(format!("follow-up did not finish: {e}")),
        }
    }
    Ok((case, ev.pending))
}

/// Stores whose single commit step decides the outcome on its own.
fn strict_commit(opts: &StoreOpts) -> bool {
    match opts.kind {
        StoreKind::Central => true,
        StoreKind::Sep => opts.replication == 1,
        _ => false,
    }
}

fn classify(v: &[u8]) -> Result<Outcome, String> {
    match stamp_check(v) {
        StampCheck::Consistent {
            key_hash: h,
            generation,
        } if h == key_hash(KEY) => match generation {
            1 => Ok(Outcome::Old),
            2 => Ok(Outcome::New),
            g => Err(format!("unexpected generation {g}")),
        },
        other => Err(format!("mixed or foreign value: {other:?}")),
    }
}

fn point(at: u64, device: Option<DeviceId>, survivors: Survivors) -> CrashPoint {
    CrashPoint {
        at,
        device,
        permanent: false,
        survivors,
    }
}

/// Crashes every device touched by the put at every one of its
/// sub-operations, once per surviving prefix of unconfirmed sub-writes, and
/// (for stores with a server) the server at every sub-operation.
pub fn crash_sweep(opts: &StoreOpts) -> Result<SweepVerdict> {
    let points = crash_points(opts)?;
    let mut cases = Vec::new();
    for e in &points {
        if let Some(d) = e.device {
            let run = start(opts, Some(point(e.index, None, Survivors::DurableOnly)))?;
            let (case, pending) = finish(run, e, d, "durable".into())?;
            cases.push(case);
            for (conn, n) in pending {
                for k in 1..=n {
                    let keep = Survivors::Prefix(BTreeMap::from([(conn, k)]));
                    let run = start(opts, Some(point(e.index, None, keep)))?;
                    cases.push(finish(run, e, d, format!("conn{}:{k}/{n}", conn.0))?.0);
                }
            }
            let run = start(opts, Some(point(e.index, None, Survivors::All)))?;
            cases.push(finish(run, e, d, "all".into())?.0);
        }
        if opts.kind != StoreKind::DirectLock && opts.kind != StoreKind::DirectCrc {
            let run = start(opts, Some(point(e.index, Some(SERVER), Survivors::DurableOnly)))?;
            cases.push(finish(run, e, SERVER, "-".into())?.0);
        }
    }
    Ok(SweepVerdict {
        store: opts.kind,
        replication: opts.replication,
        points,
        cases,
    })
}
