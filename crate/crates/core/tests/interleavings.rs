//! Interleavings of small concurrent scenarios, one schedule of
//! sub-operation executions at a time. Store scenarios are explored over
//! every schedule with at most `PREEMPTIONS` forced task switches.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use dpmkv::central::{CentralConfig, CentralStore};
use dpmkv::direct::{DirectConfig, DirectStore, Variant};
use dpmkv::fabric::{explore, explore_bounded, Endpoint, ExploreError, ExploreStats, Port, Sim, SimConfig};
use dpmkv::sep::{SepConfig, SepStore};
use dpmkv::stamp::{key_hash, stamp, stamp_check, StampCheck};
use dpmkv::{KvStore, StoreError, StoreKind};

const BOUND: u64 = 3_000_000;
const PREEMPTIONS: usize = 3;
const SIZE: usize = 16;

fn config() -> SimConfig {
    SimConfig {
        max_steps: 10_000,
        ..SimConfig::with_devices(2)
    }
}

fn schedules<F>(body: F) -> Result<ExploreStats, ExploreError>
where
    F: FnMut(&Sim) -> Result<(), String>,
{
    explore_bounded(config(), PREEMPTIONS, BOUND, body)
}

#[derive(Clone)]
enum Any {
    Direct(dpmkv::direct::DirectClient),
    Central(dpmkv::central::CentralClient),
    Sep(dpmkv::sep::SepClient),
}

impl Any {
    async fn create(&self, key: &[u8]) -> Result<(), StoreError> {
        match self {
            Any::Direct(c) => c.create(key, SIZE as u64).await,
            Any::Central(c) => c.create(key, SIZE as u64).await,
            Any::Sep(c) => c.create(key, SIZE as u64).await,
        }
    }

    async fn put(&self, key: &[u8], gen: u32) -> Result<(), StoreError> {
        let v = stamp(key, gen, SIZE);
        match self {
            Any::Direct(c) => c.put(key, &v).await,
            Any::Central(c) => c.put(key, &v).await,
            Any::Sep(c) => c.put(key, &v).await,
        }
    }

    async fn get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        match self {
            Any::Direct(c) => c.get(key).await,
            Any::Central(c) => c.get(key).await,
            Any::Sep(c) => c.get(key).await,
        }
    }
}

/// A store of `kind` on `sim` and a client per compute node.
fn clients(sim: &Sim, kind: StoreKind, n: u16) -> Vec<Any> {
    match kind {
        StoreKind::DirectLock | StoreKind::DirectCrc => {
            let v = if kind == StoreKind::DirectLock {
                Variant::Lock
            } else {
                Variant::Crc
            };
            let s = DirectStore::new(sim, DirectConfig::new(v));
            (0..n).map(|i| Any::Direct(s.client(i))).collect()
        }
        StoreKind::Central => {
            let s = CentralStore::new(sim, CentralConfig::default());
            (0..n).map(|i| Any::Central(s.client(i))).collect()
        }
        StoreKind::Sep => {
            let s = SepStore::new(sim, SepConfig::default());
            (0..n).map(|i| Any::Sep(s.client(i))).collect()
        }
    }
}

/// Generation of a read of `key`, or why it is not a whole value of it.
fn generation(key: &[u8], v: &[u8]) -> Result<u32, String> {
    match stamp_check(v) {
        StampCheck::Consistent { generation: 0, .. } => Ok(0),
        StampCheck::Consistent {
            key_hash: h,
            generation,
        } if h == key_hash(key) => Ok(generation),
        other => Err(format!("read of {key:?} returned {other:?}")),
    }
}

/// Generation of the last recorded commit of `key` (0 if none).
fn last_commit(sim: &Sim, key: &[u8]) -> u32 {
    sim.with_commits(|cs| {
        cs.iter()
            .rev()
            .find(|c| c.mark.key == key)
            .map(|c| generation(key, &c.mark.stamp.to_le_bytes()).unwrap_or(u32::MAX))
            .unwrap_or(0)
    })
}

/// Generations of `key` committed so far.
fn committed(sim: &Sim, key: &[u8]) -> BTreeSet<u32> {
    sim.with_commits(|cs| {
        cs.iter()
            .filter(|c| c.mark.key == key)
            .filter_map(|c| generation(key, &c.mark.stamp.to_le_bytes()).ok())
            .collect()
    })
}

fn setup(sim: &Sim, c: &Any, keys: &[&'static [u8]]) -> Result<(), String> {
    let (c, keys) = (c.clone(), keys.to_vec());
    sim.block_on(async move {
        for k in keys {
            c.create(k).await?;
            c.put(k, 1).await?;
        }
        Ok::<_, StoreError>(())
    })
    .map_err(|e| e.to_string())?
    .map_err(|e| e.to_string())
}

#[test]
fn two_cas_one_winner() {
    let mut winners = BTreeSet::new();
    let stats = explore(SimConfig::with_devices(1), BOUND, |s| {
        let wins = Rc::new(RefCell::new(Vec::new()));
        for id in [1u64, 2] {
            let port = Port::new(s, Endpoint::Cn(id as u16));
            let wins = wins.clone();
            s.spawn(async move {
                if port.cas(0, 0, 0, id).await.unwrap() == 0 {
                    wins.borrow_mut().push(id);
                }
            });
        }
        s.run().map_err(|e| e.to_string())?;
        let w = wins.borrow();
        if w.len() != 1 {
            return Err(format!("{} winners", w.len()));
        }
        let word = s.with_device(0, |d| u64::from_le_bytes(d.peek(0, 8).try_into().unwrap()));
        if word != w[0] {
            return Err(format!("word {word} but winner {}", w[0]));
        }
        winners.insert(w[0]);
        Ok(())
    })
    .unwrap();
    assert_eq!(stats.schedules, 2);
    assert_eq!(winners.len(), 2);
}

/// Two writers of one key: both finish and the last commit is what stays.
fn racing_writers(kind: StoreKind) -> u64 {
    let mut finals = BTreeSet::new();
    let stats = schedules(|s| {
        let cs = clients(s, kind, 2);
        setup(s, &cs[0], &[b"k"])?;
        for (c, g) in cs.iter().cloned().zip([2, 3]) {
            s.spawn(async move { c.put(b"k", g).await.unwrap() });
        }
        s.run().map_err(|e| e.to_string())?;
        let c = cs[1].clone();
        let v = s
            .block_on(async move { c.get(b"k").await })
            .map_err(|e| e.to_string())?;
        let g = generation(b"k", &v.map_err(|e| e.to_string())?)?;
        if committed(s, b"k") != BTreeSet::from([1, 2, 3]) {
            return Err(format!("commits {:?}", committed(s, b"k")));
        }
        if g != last_commit(s, b"k") {
            return Err(format!("read gen {g}, last commit gen {}", last_commit(s, b"k")));
        }
        finals.insert(g);
        Ok(())
    })
    .unwrap_or_else(|e| panic!("{kind}: {e}"));
    assert_eq!(finals, BTreeSet::from([2, 3]), "{kind}: both orders reachable");
    stats.schedules
}

#[test]
fn direct_lock_writers_serialise() {
    assert!(racing_writers(StoreKind::DirectLock) > 2);
}

#[test]
fn direct_crc_writers_serialise() {
    assert!(racing_writers(StoreKind::DirectCrc) > 2);
}

#[test]
fn central_writers_serialise() {
    assert!(racing_writers(StoreKind::Central) > 2);
}

#[test]
fn sep_appends_race() {
    assert!(racing_writers(StoreKind::Sep) > 2);
}

/// A read running alongside a write returns the old or the new value whole,
/// and only once it has been committed.
fn read_during_write(kind: StoreKind) -> BTreeSet<u32> {
    let mut seen = BTreeSet::new();
    schedules(|s| {
        let cs = clients(s, kind, 2);
        setup(s, &cs[0], &[b"k"])?;
        let w = cs[0].clone();
        s.spawn(async move { w.put(b"k", 2).await.unwrap() });
        let r = cs[1].clone();
        let read = s.spawn_with_result(async move { r.get(b"k").await });
        s.run().map_err(|e| e.to_string())?;
        let v = read.take().unwrap().map_err(|e| e.to_string())?;
        let g = generation(b"k", &v)?;
        if g != 1 && g != 2 {
            return Err(format!("gen {g}"));
        }
        seen.insert(g);
        Ok(())
    })
    .unwrap_or_else(|e| panic!("{kind}: {e}"));
    seen
}

#[test]
fn direct_crc_read_during_write() {
    assert_eq!(read_during_write(StoreKind::DirectCrc), BTreeSet::from([1, 2]));
}

#[test]
fn direct_lock_read_during_write() {
    assert_eq!(read_during_write(StoreKind::DirectLock), BTreeSet::from([1, 2]));
}

#[test]
fn sep_read_during_write() {
    assert_eq!(read_during_write(StoreKind::Sep), BTreeSet::from([1, 2]));
}

#[test]
fn central_two_keys_three_tasks() {
    let mut reads = BTreeSet::new();
    schedules(|s| {
        let cs = clients(s, StoreKind::Central, 3);
        setup(s, &cs[0], &[b"a", b"b"])?;
        let script: [(&'static [u8], u32, &'static [u8]); 3] = [(b"a", 2, b"b"), (b"b", 2, b"a"), (b"a", 3, b"a")];
        let handles: Vec<_> = cs
            .iter()
            .cloned()
            .zip(script)
            .map(|(c, (pk, g, rk))| {
                let sim = s.clone();
                s.spawn_with_result(async move {
                    c.put(pk, g).await.unwrap();
                    let v = c.get(rk).await.unwrap();
                    // Whatever is read must already be committed.
                    let gen = generation(rk, &v)?;
                    if !committed(&sim, rk).contains(&gen) {
                        return Err(format!("{rk:?} read uncommitted gen {gen}"));
                    }
                    Ok((rk, gen))
                })
            })
            .collect();
        s.run().map_err(|e| e.to_string())?;
        for h in handles {
            reads.insert(h.take().unwrap()?);
        }
        for k in [&b"a"[..], b"b"] {
            let c = cs[0].clone();
            let v = s.block_on(async move { c.get(k).await.unwrap() }).unwrap();
            if generation(k, &v)? != last_commit(s, k) {
                return Err(format!("{k:?} final value is not its last commit"));
            }
        }
        Ok(())
    })
    .unwrap();
    // The third task reads its own write or the first task's later one.
    assert!(reads.contains(&(&b"a"[..], 3)));
    assert!(reads.contains(&(&b"a"[..], 2)));
}

#[test]
fn racing_creates_have_one_winner() {
    for kind in StoreKind::ALL {
        schedules(|s| {
            let cs = clients(s, kind, 2);
            let handles: Vec<_> = cs
                .into_iter()
                .map(|c| s.spawn_with_result(async move { c.create(b"k").await }))
                .collect();
            s.run().map_err(|e| e.to_string())?;
            let results: Vec<_> = handles.into_iter().map(|h| h.take().unwrap()).collect();
            let ok = results.iter().filter(|r| r.is_ok()).count();
            let exists = results
                .iter()
                .filter(|r| matches!(r, Err(StoreError::KeyExists)))
                .count();
            if (ok, exists) != (1, 1) {
                return Err(format!("{results:?}"));
            }
            Ok(())
        })
        .unwrap_or_else(|e| panic!("{kind}: {e}"));
    }
}

#[test]
fn direct_lock_is_mutually_exclusive() {
    schedules(|s| {
        let store = DirectStore::new(s, DirectConfig::new(Variant::Lock));
        let c = store.client(0);
        let v = stamp(b"k", 1, SIZE);
        s.block_on(async move {
            c.create(b"k", SIZE as u64).await.unwrap();
            c.put(b"k", &v).await.unwrap();
        })
        .map_err(|e| e.to_string())?;
        for cn in 1..3u16 {
            let c = store.client(cn);
            s.spawn(async move {
                c.put(b"k", &stamp(b"k", 1 + cn as u32, SIZE)).await.unwrap();
                c.get(b"k").await.unwrap();
            });
        }
        s.run().map_err(|e| e.to_string())?;
        match store.max_lock_holders() {
            1 => Ok(()),
            n => Err(format!("{n} simultaneous lock holders")),
        }
    })
    .unwrap();
}
