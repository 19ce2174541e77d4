//! Coordinator-mediated store. Clients send every request to a coordinator,
//! which owns all metadata, serialises access per key with local locks and
//! writes new values out of place.
//!
//! The coordinator's local persistent memory holds the key -> location map,
//! the allocator and an intent table. A put records an intent when it
//! allocates, and the local flush that publishes the new location is the
//! commit point. Intents still present after a coordinator crash are rolled
//! forward (committed: free the old copy) or back (free the new copy).

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use crate::alloc::{size_class, ChunkAllocator, Region};
use crate::api::{commit_mark, Key, KvStore, StoreError, StoreKind};
use crate::cache::{Cache, Policy};
use crate::fabric::{DeviceId, Endpoint, FabricError, OpRequest, Port, Sim, SimRwLock, SimSemaphore, TaskId};
use crate::rpc::frame_len;

#[derive(Clone, Copy, Debug)]
pub struct CentralConfig {
    pub replication: usize,
    /// Concurrent request handlers at the coordinator.
    pub handlers: u32,
    /// Data cache size as a percentage of the number of keys.
    pub cache_percent: u32,
    pub chunk_size: u64,
}

impl Default for CentralConfig {
    fn default() -> Self {
        CentralConfig {
            replication: 1,
            handlers: 8,
            cache_percent: 0,
            chunk_size: 64 * 1024,
        }
    }
}

/// Committed location of a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Location {
    /// Entry capacity.
    pub size: u64,
    /// Current value length.
    pub len: u64,
    pub replicas: Vec<Region>,
}

#[derive(Clone, Debug)]
struct Intent {
    key: Key,
    owner: Option<TaskId>,
    len: u64,
    size: u64,
    new: Vec<Region>,
    /// Set by the commit flush: the replaced location, still to be freed.
    old: Option<Vec<Region>>,
    committed: bool,
    delete: bool,
}

/// Coordinator-local persistent state.
struct Durable {
    meta: HashMap<Key, Location>,
    intents: BTreeMap<u64, Intent>,
    alloc: ChunkAllocator,
    next_txn: u64,
}

struct Volatile {
    locks: HashMap<Key, SimRwLock>,
    cache: Cache<Key, Vec<u8>>,
    load: Vec<u64>,
    active: HashSet<TaskId>,
}

struct Coord {
    sim: Sim,
    config: CentralConfig,
    port: Port,
    handlers: SimSemaphore,
    durable: RefCell<Durable>,
    backup: RefCell<HashMap<Key, Location>>,
    vol: RefCell<Volatile>,
}

/// The coordinator and its shared state.
#[derive(Clone)]
pub struct CentralStore(Rc<Coord>);

/// One compute node's handle. It keeps only the keys it has seen.
#[derive(Clone)]
pub struct CentralClient {
    coord: Rc<Coord>,
    port: Port,
    cn: u16,
    keys: Rc<RefCell<HashSet<Key>>>,
}

/// Removes the current task from the active-handler set when dropped.
struct Active<'a> {
    coord: &'a Coord,
    task: Option<TaskId>,
}

impl Drop for Active<'_> {
    fn drop(&mut self) {
        if let Some(t) = self.task {
            self.coord.vol.borrow_mut().active.remove(&t);
        }
    }
}

impl CentralStore {
    pub fn new(sim: &Sim, config: CentralConfig) -> CentralStore {
        let devices = sim.device_count();
        assert!(config.replication >= 1 && config.replication <= devices as usize);
        let capacity = sim.with_device(0, |d| d.capacity());
        CentralStore(Rc::new(Coord {
            sim: sim.clone(),
            config,
            port: Port::new(sim, Endpoint::Coord),
            handlers: SimSemaphore::new(sim, config.handlers, Some("coord.handlers")),
            durable: RefCell::new(Durable {
                meta: HashMap::new(),
                intents: BTreeMap::new(),
                alloc: ChunkAllocator::new(devices, 0, capacity, config.chunk_size),
                next_txn: 0,
            }),
            backup: RefCell::new(HashMap::new()),
            vol: RefCell::new(Volatile {
                locks: HashMap::new(),
                cache: Cache::new(Policy::Fifo, 0),
                load: vec![0; devices as usize],
                active: HashSet::new(),
            }),
        }))
    }

    pub fn client(&self, cn: u16) -> CentralClient {
        CentralClient {
            coord: self.0.clone(),
            port: Port::new(&self.0.sim, Endpoint::Cn(cn)),
            cn,
            keys: Rc::default(),
        }
    }

    pub fn location(&self, key: &[u8]) -> Option<Location> {
        self.0.durable.borrow().meta.get(key).cloned()
    }

    pub fn backup_location(&self, key: &[u8]) -> Option<Location> {
        self.0.backup.borrow().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.0.durable.borrow().meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending_intents(&self) -> usize {
        self.0.durable.borrow().intents.len()
    }

    pub fn allocated(&self, device: DeviceId) -> u64 {
        self.0.durable.borrow().alloc.in_use(device)
    }

    /// (hits, misses) of the data cache.
    pub fn cache_stats(&self) -> (u64, u64) {
        let v = self.0.vol.borrow();
        (v.cache.hits(), v.cache.misses())
    }

    /// Loses all coordinator-volatile state: in-flight handlers are killed,
    /// locks and cache are dropped. Local persistent memory is then replayed.
    pub fn crash_coordinator(&self) {
        let active: Vec<TaskId> = {
            let mut v = self.0.vol.borrow_mut();
            v.locks.clear();
            v.cache.clear();
            v.active.drain().collect()
        };
        for t in active {
            self.0.sim.kill(t);
        }
        self.0.reconcile(None);
    }

    /// Replaces the primary's key map with the backup's after a crash.
    pub fn fail_over(&self) {
        let backup = self.0.backup.borrow().clone();
        self.0.durable.borrow_mut().meta = backup;
        self.crash_coordinator();
    }

    /// Settles puts that were in flight when `device` failed: committed ones
    /// keep their new location, the rest keep the old one. Returns the
    /// number of intents settled.
    pub fn recover_dpm(&self, device: DeviceId) -> usize {
        self.0.reconcile(Some(device))
    }
}

impl Coord {
    fn is_active(&self, t: Option<TaskId>) -> bool {
        t.is_some_and(|t| self.vol.borrow().active.contains(&t))
    }

    fn reconcile(&self, device: Option<DeviceId>) -> usize {
        let mut d = self.durable.borrow_mut();
        let orphans: Vec<u64> = d
            .intents
            .iter()
            .filter(|(_, i)| !self.is_active(i.owner))
            .filter(|(_, i)| device.is_none_or(|dev| i.new.iter().any(|r| r.device == dev)) || i.committed)
            .map(|(t, _)| *t)
            .collect();
        for t in &orphans {
            let intent = d.intents.remove(t).unwrap();
            let dead = if intent.committed {
                intent.old.unwrap_or_default()
            } else {
                intent.new
            };
            for r in dead {
                d.alloc.free(r);
            }
        }
        orphans.len()
    }

    fn lock(&self, key: &[u8]) -> SimRwLock {
        let mut v = self.vol.borrow_mut();
        v.locks
            .entry(key.to_vec())
            .or_insert_with(|| SimRwLock::new(&self.sim))
            .clone()
    }

    fn enter(&self) -> Active<'_> {
        let task = self.sim.current_task();
        if let Some(t) = task {
            self.vol.borrow_mut().active.insert(t);
        }
        Active { coord: self, task }
    }

    fn resize_cache(&self) {
        let keys = self.durable.borrow().meta.len();
        let cap = keys * self.config.cache_percent as usize / 100;
        self.vol.borrow_mut().cache.set_capacity(cap);
    }

    /// Picks `n` distinct live devices with room, least loaded first.
    fn place(&self, class: u64) -> Result<Vec<Region>, StoreError> {
        let n = self.config.replication;
        let mut d = self.durable.borrow_mut();
        let v = self.vol.borrow();
        let mut devs: Vec<DeviceId> = (0..self.sim.device_count())
            .filter(|&dev| self.sim.is_alive(dev) && d.alloc.has_room(dev, class))
            .collect();
        if devs.len() < n {
            return Err(StoreError::OutOfSpace);
        }
        devs.sort_by_key(|&dev| (v.load[dev as usize], dev));
        devs.truncate(n);
        devs.into_iter().map(|dev| d.alloc.alloc(dev, class)).collect()
    }

    fn begin(&self, key: &[u8], size: u64, len: u64, new: Vec<Region>, delete: bool) -> u64 {
        let mut d = self.durable.borrow_mut();
        let txn = d.next_txn;
        d.next_txn += 1;
        d.intents.insert(
            txn,
            Intent {
                key: key.to_vec(),
                owner: self.sim.current_task(),
                len,
                size,
                new,
                old: None,
                committed: false,
                delete,
            },
        );
        txn
    }

    fn abort(&self, txn: u64) {
        let mut d = self.durable.borrow_mut();
        if let Some(i) = d.intents.remove(&txn) {
            for r in i.new {
                d.alloc.free(r);
            }
        }
    }

    /// Body of the commit flush. Returns false if the key's existence no
    /// longer matches what the intent expects.
    fn commit(self: &Rc<Self>, txn: u64, create: bool) -> bool {
        let mut d = self.durable.borrow_mut();
        let d = &mut *d;
        let Some(intent) = d.intents.get_mut(&txn) else {
            return false;
        };
        let exists = d.meta.contains_key(&intent.key);
        if exists == create {
            return false;
        }
        let old = if intent.delete {
            d.meta.remove(&intent.key).map(|l| l.replicas)
        } else {
            d.meta
                .insert(
                    intent.key.clone(),
                    Location {
                        size: intent.size,
                        len: intent.len,
                        replicas: intent.new.clone(),
                    },
                )
                .map(|l| l.replicas)
        };
        intent.old = Some(old.unwrap_or_default());
        intent.committed = true;
        let mut b = self.backup.borrow_mut();
        match d.meta.get(&intent.key) {
            Some(l) => b.insert(intent.key.clone(), l.clone()),
            None => b.remove(&intent.key),
        };
        true
    }

    /// Frees the replaced location of a committed intent.
    fn apply(&self, txn: u64) {
        let mut d = self.durable.borrow_mut();
        if let Some(i) = d.intents.remove(&txn) {
            for r in i.old.unwrap_or_default() {
                d.alloc.free(r);
            }
        }
    }

    async fn write_validate(&self, regions: &[Region], data: &[u8]) -> Result<(), StoreError> {
        let writes = regions
            .iter()
            .map(|r| OpRequest::Write {
                device: r.device,
                address: r.address,
                data: data.to_vec(),
            })
            .collect();
        for r in self.port.batch(writes).await {
            r?;
        }
        {
            let mut v = self.vol.borrow_mut();
            for r in regions {
                v.load[r.device as usize] += data.len() as u64;
            }
        }
        let last = (data.len() as u64).max(1) - 1;
        let reads = regions
            .iter()
            .map(|r| OpRequest::Read {
                device: r.device,
                address: r.address + last,
                len: 1,
            })
            .collect();
        for r in self.port.batch(reads).await {
            r?;
        }
        Ok(())
    }

    async fn handle_create(self: &Rc<Self>, key: &[u8], size: u64) -> Result<(), StoreError> {
        if self.durable.borrow().meta.contains_key(key) {
            return Err(StoreError::KeyExists);
        }
        let new = self.place(size_class(size))?;
        let txn = self.begin(key, size, size, new.clone(), false);
        if let Err(e) = self.write_validate(&new, &vec![0; size as usize]).await {
            self.abort(txn);
            return Err(e);
        }
        let ok = Rc::new(RefCell::new(false));
        let (me, flag) = (self.clone(), ok.clone());
        self.port
            .persist(None, move || *flag.borrow_mut() = me.commit(txn, true))
            .await;
        if !*ok.borrow() {
            self.abort(txn);
            return Err(StoreError::KeyExists);
        }
        self.apply(txn);
        self.resize_cache();
        Ok(())
    }

    async fn handle_put(self: &Rc<Self>, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        let size = match self.durable.borrow().meta.get(key) {
            Some(l) => l.size,
            None => return Err(StoreError::KeyNotFound),
        };
        if value.len() as u64 > size {
            return Err(StoreError::ValueTooLarge { len: value.len(), size });
        }
        let new = self.place(size_class(size))?;
        let txn = self.begin(key, size, value.len() as u64, new.clone(), false);
        if let Err(e) = self.write_validate(&new, value).await {
            self.abort(txn);
            return Err(e);
        }
        let lock = self.lock(key);
        let _w = lock.write().await;
        let ok = Rc::new(RefCell::new(false));
        let (me, flag) = (self.clone(), ok.clone());
        self.port
            .persist(Some(commit_mark(key, value)), move || {
                *flag.borrow_mut() = me.commit(txn, false)
            })
            .await;
        if !*ok.borrow() {
            self.abort(txn);
            return Err(StoreError::KeyNotFound);
        }
        self.apply(txn);
        self.vol.borrow_mut().cache.insert(key.to_vec(), value.to_vec());
        Ok(())
    }

    async fn handle_get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        let lock = self.lock(key);
        let _r = lock.read().await;
        let loc = self
            .durable
            .borrow()
            .meta
            .get(key)
            .cloned()
            .ok_or(StoreError::KeyNotFound)?;
        if let Some(v) = self.vol.borrow_mut().cache.get(&key.to_vec()) {
            return Ok(v);
        }
        if loc.len == 0 {
            return Ok(Vec::new());
        }
        let mut order = loc.replicas.clone();
        {
            let v = self.vol.borrow();
            order.sort_by_key(|r| (v.load[r.device as usize], r.device));
        }
        let mut last = FabricError::DeviceUnavailable(order[0].device);
        for r in order.iter().filter(|r| self.sim.is_alive(r.device)) {
            match self.port.read(r.device, r.address, loc.len).await {
                Ok(v) => {
                    let mut vol = self.vol.borrow_mut();
                    vol.load[r.device as usize] += loc.len;
                    vol.cache.insert(key.to_vec(), v.clone());
                    return Ok(v);
                }
                Err(e) => last = e,
            }
        }
        Err(last.into())
    }

    async fn handle_del(self: &Rc<Self>, key: &[u8]) -> Result<(), StoreError> {
        let lock = self.lock(key);
        let _w = lock.write().await;
        let txn = self.begin(key, 0, 0, Vec::new(), true);
        let ok = Rc::new(RefCell::new(false));
        let (me, flag) = (self.clone(), ok.clone());
        self.port
            .persist(None, move || *flag.borrow_mut() = me.commit(txn, false))
            .await;
        if !*ok.borrow() {
            self.abort(txn);
            return Err(StoreError::KeyNotFound);
        }
        self.apply(txn);
        self.vol.borrow_mut().cache.remove(&key.to_vec());
        self.resize_cache();
        Ok(())
    }
}

impl CentralClient {
    pub fn cn(&self) -> u16 {
        self.cn
    }

    pub fn port(&self) -> &Port {
        &self.port
    }

    /// Bytes of metadata held at this compute node: its known keys only.
    pub fn metadata_bytes(&self) -> usize {
        self.keys.borrow().iter().map(Vec::len).sum()
    }

    /// One request/response exchange. `req` and `resp` are (value bytes)
    /// carried each way.
    async fn call<T>(
        &self,
        key: &[u8],
        req: usize,
        resp: impl Fn(&Result<T, StoreError>) -> usize,
        handle: impl AsyncFnOnce(&Rc<Coord>) -> Result<T, StoreError>,
    ) -> Result<T, StoreError> {
        let _permit = self.coord.handlers.acquire().await;
        let _active = self.coord.enter();
        let max_resp = frame_len(key.len(), 0).max(frame_len(key.len(), req));
        self.port
            .rpc(Endpoint::Coord, frame_len(key.len(), req), max_resp, req as u64)
            .await?;
        let res = handle(&self.coord).await;
        let n = resp(&res);
        self.port.rpc_reply(
            Endpoint::Coord,
            frame_len(key.len(), n),
            if n > 8 { n as u64 } else { 0 },
        );
        res
    }
}

impl KvStore for CentralClient {
    fn kind(&self) -> StoreKind {
        StoreKind::Central
    }

    async fn create(&self, key: &[u8], size: u64) -> Result<(), StoreError> {
        let res = self
            .call(key, 8, |_| 0, async |c: &Rc<Coord>| c.handle_create(key, size).await)
            .await;
        if res.is_ok() {
            self.keys.borrow_mut().insert(key.to_vec());
        }
        res
    }

    async fn put(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        self.call(
            key,
            value.len(),
            |_| 0,
            async |c: &Rc<Coord>| c.handle_put(key, value).await,
        )
        .await
    }

    async fn get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        self.call(
            key,
            0,
            |r: &Result<Vec<u8>, _>| r.as_ref().map_or(0, Vec::len),
            async |c: &Rc<Coord>| c.handle_get(key).await,
        )
        .await
    }

    async fn del(&self, key: &[u8]) -> Result<(), StoreError> {
        let res = self
            .call(key, 0, |_| 0, async |c: &Rc<Coord>| c.handle_del(key).await)
            .await;
        self.keys.borrow_mut().remove(key);
        res
    }
}
