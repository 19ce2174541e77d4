//! Separated store. Data lives in per-key chains of out-of-place versions
//! that compute nodes read and append to directly with one-sided ops; a
//! metadata server hands out slots, reclaims retired ones and tracks each
//! chain's head, but never touches device memory.
//!
//! A put writes a new slot, validates it and CASes the tail's header from
//! NIL to a link; that CAS is the commit point. Replicated keys (R > 1)
//! hold the tail with B_w while links are written to every copy of it.

pub mod header;
pub mod ms;

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use crate::api::{commit_mark, Key, KvStore, StoreError, StoreKind};
use crate::cache::{Cache, Policy};
use crate::fabric::{
    CommitMark, DeviceId, Endpoint, FabricError, OpOutput, OpRequest, Port, Sim, SimSemaphore, TaskId,
};
use crate::rpc::frame_len;

pub use header::{Header, SlotLayout, SlotRef, SlotView, Version};
pub use ms::{KeyRecord, MetaServer, MsConfig, Retire, SlotState, Transition};

use header::{decode_shortcut, key_tag, shortcut_word};

/// Port identity used by recovery.
pub const RECOVERY_CN: u16 = u16::MAX;

/// Restarts through the metadata server before a get gives up.
const MAX_RESTARTS: u32 = 16;

#[derive(Clone, Copy, Debug)]
pub struct SepConfig {
    pub replication: usize,
    /// Rounds after which a read restarts; also the minimum reclamation
    /// delay of a retired slot.
    pub read_abort_t: u64,
    /// Idle rounds after which a cursor is dropped, and the extra wait of a
    /// slot whose gc version wrapped.
    pub epoch_t: u64,
    /// Metadata cache size as a percentage of the number of keys.
    pub cache_percent: u32,
    pub cache_policy: Policy,
    pub load_balance: bool,
    /// Refill a buffer bucket in the background below this many slots ...
    pub buffer_low: usize,
    /// ... up to this many.
    pub buffer_high: usize,
    pub retire_batch: usize,
    pub chunk_size: u64,
    pub shortcut_bytes: u64,
    pub ms_handlers: u32,
    pub record_transitions: bool,
}

impl Default for SepConfig {
    fn default() -> Self {
        SepConfig {
            replication: 1,
            read_abort_t: 64,
            epoch_t: 4096,
            cache_percent: 100,
            cache_policy: Policy::Fifo,
            load_balance: true,
            buffer_low: 4,
            buffer_high: 16,
            retire_batch: 32,
            chunk_size: 64 * 1024,
            shortcut_bytes: 64 * 1024,
            ms_handlers: 8,
            record_transitions: false,
        }
    }
}

/// What a compute node caches per key.
#[derive(Clone, Debug)]
struct KeyMeta {
    incarnation: u64,
    size: u64,
    replication: usize,
    cursor: Version,
    /// The cursor is the head handed out by the metadata server, usually
    /// well behind the tail.
    from_head: bool,
    valid: bool,
    last_active: u64,
    shortcut: (DeviceId, u64),
}

type MetaRef = Rc<RefCell<KeyMeta>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Writing,
    BwHeld,
    Linked,
}

struct Intent {
    key: Key,
    incarnation: u64,
    cn: Rc<CnState>,
    task: Option<TaskId>,
    layout: SlotLayout,
    new: Version,
    tail: Option<Version>,
    phase: Phase,
    mark: CommitMark,
}

/// Per compute node state, shared by all of its client handles.
struct CnState {
    id: u16,
    cache: RefCell<Cache<Key, MetaRef>>,
    /// Size class -> per-device stacks of assigned slots.
    buffers: RefCell<HashMap<u64, Vec<Vec<SlotRef>>>>,
    refilling: RefCell<HashSet<u64>>,
    retires: RefCell<Vec<Retire>>,
    retire_since: Cell<u64>,
    flushing: Cell<bool>,
    /// Bytes exchanged with each device.
    load: RefCell<Vec<u64>>,
    epoch_floor: Cell<u64>,
    rr: Cell<usize>,
}

struct Shared {
    sim: Sim,
    config: SepConfig,
    ms: RefCell<MetaServer>,
    handlers: SimSemaphore,
    ms_port: Port,
    cns: RefCell<BTreeMap<u16, Rc<CnState>>>,
    intents: RefCell<BTreeMap<u64, Intent>>,
    next_intent: Cell<u64>,
}

#[derive(Clone)]
pub struct SepStore(Rc<Shared>);

#[derive(Clone)]
pub struct SepClient {
    shared: Rc<Shared>,
    cn: Rc<CnState>,
    port: Port,
}

enum Flow<T> {
    Done(Result<T, StoreError>),
    Restart,
}

enum Hop {
    Tail(Vec<u8>),
    Next(Version),
    Deleted,
    Busy,
    Stale,
}

fn classify(view: &SlotView, copy: SlotRef, tag: u32) -> Hop {
    let h = view.header;
    if h.gc != copy.gc || view.tag != tag {
        return Hop::Stale;
    }
    if h.is_tombstone() {
        return Hop::Deleted;
    }
    match view.next() {
        Some(_) if h.rep => Hop::Busy,
        Some(n) => Hop::Next(n),
        None => match &view.payload {
            Some(p) => Hop::Tail(p.clone()),
            None => Hop::Stale,
        },
    }
}

fn one(s: SlotRef) -> Version {
    Version { copies: vec![s] }
}

fn word(out: Result<OpOutput, FabricError>) -> Result<u64, FabricError> {
    out.map(|o| u64::from_le_bytes(o.into_bytes()[..8].try_into().unwrap()))
}

impl SepStore {
    pub fn new(sim: &Sim, config: SepConfig) -> SepStore {
        let devices = sim.device_count();
        assert!(config.replication >= 1 && config.replication <= devices as usize);
        let capacity = sim.with_device(0, |d| d.capacity());
        let ms = MetaServer::new(MsConfig {
            devices,
            device_capacity: capacity,
            chunk_size: config.chunk_size,
            shortcut_bytes: config.shortcut_bytes,
            read_abort_t: config.read_abort_t,
            epoch_t: config.epoch_t,
            load_balance: config.load_balance,
            record_transitions: config.record_transitions,
        });
        SepStore(Rc::new(Shared {
            sim: sim.clone(),
            config,
            ms: RefCell::new(ms),
            handlers: SimSemaphore::new(sim, config.ms_handlers, Some("ms.handlers")),
            ms_port: Port::new(sim, Endpoint::Ms),
            cns: RefCell::new(BTreeMap::new()),
            intents: RefCell::new(BTreeMap::new()),
            next_intent: Cell::new(0),
        }))
    }

    pub fn config(&self) -> &SepConfig {
        &self.0.config
    }

    pub fn client(&self, cn: u16) -> SepClient {
        let devices = self.0.sim.device_count() as usize;
        let state = self
            .0
            .cns
            .borrow_mut()
            .entry(cn)
            .or_insert_with(|| {
                Rc::new(CnState {
                    id: cn,
                    cache: RefCell::new(Cache::new(self.0.config.cache_policy, 0)),
                    buffers: RefCell::new(HashMap::new()),
                    refilling: RefCell::new(HashSet::new()),
                    retires: RefCell::new(Vec::new()),
                    retire_since: Cell::new(0),
                    flushing: Cell::new(false),
                    load: RefCell::new(vec![0; devices]),
                    epoch_floor: Cell::new(0),
                    rr: Cell::new(cn as usize),
                })
            })
            .clone();
        SepClient {
            shared: self.0.clone(),
            cn: state,
            port: Port::new(&self.0.sim, Endpoint::Cn(cn)),
        }
    }

    pub fn record(&self, key: &[u8]) -> Option<KeyRecord> {
        self.0.ms.borrow().lookup(key)
    }

    pub fn with_ms<T>(&self, f: impl FnOnce(&mut MetaServer) -> T) -> T {
        f(&mut self.0.ms.borrow_mut())
    }

    /// The backup metadata server takes over.
    pub fn fail_over(&self) {
        self.0.ms.borrow_mut().fail_over();
    }

    pub fn pending_intents(&self) -> usize {
        self.0.intents.borrow().len()
    }

    /// Follows `key`'s chain from the head in device memory without using
    /// the fabric, reading version copies in the order `pick` returns.
    /// Returns every version's payload, oldest first.
    pub fn chain(&self, key: &[u8], pick: impl Fn(&Version) -> Vec<SlotRef>) -> Result<Vec<Vec<u8>>, String> {
        let rec = self.record(key).ok_or("no such key")?;
        let layout = SlotLayout::new(rec.replication, rec.size);
        let tag = key_tag(key);
        let mut out = Vec::new();
        let mut pos = rec.head;
        for _ in 0..1_000_000 {
            let copy = pick(&pos)
                .into_iter()
                .find(|c| self.0.sim.is_alive(c.device))
                .ok_or("no live copy of a version")?;
            let bytes = self
                .0
                .sim
                .with_device(copy.device, |d| d.peek(copy.address, layout.slot_len()).to_vec());
            let view = layout.decode(&bytes);
            if view.header.gc != copy.gc || view.tag != tag {
                return Err(format!("version at {copy:?} does not belong to the chain"));
            }
            out.push(view.payload.clone().ok_or("bad length word")?);
            if view.header.is_tombstone() {
                return Ok(out);
            }
            match view.next() {
                Some(n) if n.copies.len() == rec.replication => pos = n,
                Some(_) => return Err("incomplete links".into()),
                None => return Ok(out),
            }
        }
        Err("chain does not terminate".into())
    }

    /// Settles puts whose task ended without finishing: a put whose link
    /// reached any copy of the old tail is completed, any other is rolled
    /// back and its slots returned. Must run in a task. Returns the number
    /// of puts settled.
    pub async fn recover(&self) -> Result<usize, StoreError> {
        let port = Port::new(&self.0.sim, Endpoint::Cn(RECOVERY_CN));
        let ids: Vec<u64> = self
            .0
            .intents
            .borrow()
            .iter()
            .filter(|(_, i)| i.task.is_none_or(|t| self.0.sim.is_done(t)))
            .map(|(id, _)| *id)
            .collect();
        let mut n = 0;
        for id in ids {
            let intent = self.0.intents.borrow_mut().remove(&id).unwrap();
            match self.settle(&port, &intent).await {
                Ok(()) => n += 1,
                Err(e) => {
                    self.0.intents.borrow_mut().insert(id, intent);
                    return Err(e);
                }
            }
        }
        Ok(n)
    }

    async fn settle(&self, port: &Port, i: &Intent) -> Result<(), StoreError> {
        let sim = &self.0.sim;
        let Some(tail) = &i.tail else {
            give_back(&i.cn, i.layout.class(), &i.new);
            return Ok(());
        };
        let live: Vec<SlotRef> = tail.copies.iter().copied().filter(|c| !sim.is_dead(c.device)).collect();
        if live.is_empty() {
            return Ok(());
        }
        let target = i.new.primary();
        let reads = live
            .iter()
            .map(|c| OpRequest::Read {
                device: c.device,
                address: c.address,
                len: 8,
            })
            .collect();
        let mut linked = i.phase == Phase::Linked;
        for r in port.batch(reads).await {
            let h = Header::decode(word(r)?);
            linked |= h.next() == Some(target);
        }
        if linked {
            if i.layout.replication > 1 {
                let writes = live
                    .iter()
                    .map(|c| OpRequest::Write {
                        device: c.device,
                        address: c.address,
                        data: i.layout.encode_links(Header::linked_to(target, c.gc), &i.new),
                    })
                    .collect();
                for r in port.batch_commit(writes, i.mark.clone()).await {
                    r?;
                }
                let confirm = live
                    .iter()
                    .map(|c| OpRequest::Read {
                        device: c.device,
                        address: c.address + i.layout.links_len() - 1,
                        len: 1,
                    })
                    .collect();
                for r in port.batch(confirm).await {
                    r?;
                }
            }
            queue_retire(
                &self.0,
                &i.cn,
                Retire {
                    key: i.key.clone(),
                    incarnation: i.incarnation,
                    version: tail.clone(),
                    successor: i.new.clone(),
                },
            );
        } else {
            if i.phase == Phase::BwHeld {
                let p = tail.primary();
                let held = Header {
                    bw: true,
                    ..Header::tail(p.gc)
                };
                port.cas(p.device, p.address, held.encode(), Header::tail(p.gc).encode())
                    .await?;
            }
            give_back(&i.cn, i.layout.class(), &i.new);
        }
        Ok(())
    }
}

/// Returns never-linked slots to their owner's buffers.
fn give_back(cn: &CnState, class: u64, v: &Version) {
    let devices = cn.load.borrow().len();
    let mut b = cn.buffers.borrow_mut();
    let stacks = b.entry(class).or_insert_with(|| vec![Vec::new(); devices]);
    for s in &v.copies {
        stacks[s.device as usize].push(*s);
    }
}

fn queue_retire(shared: &Shared, cn: &CnState, r: Retire) {
    let mut q = cn.retires.borrow_mut();
    if q.is_empty() {
        cn.retire_since.set(shared.sim.now());
    }
    q.push(r);
}

impl SepClient {
    pub fn cn(&self) -> u16 {
        self.cn.id
    }

    pub fn port(&self) -> &Port {
        &self.port
    }

    fn sim(&self) -> &Sim {
        &self.shared.sim
    }

    fn config(&self) -> &SepConfig {
        &self.shared.config
    }

    /// (hits, misses) of this node's metadata cache.
    pub fn cache_stats(&self) -> (u64, u64) {
        let c = self.cn.cache.borrow();
        (c.hits(), c.misses())
    }

    /// The cached cursor of `key`, if any.
    pub fn cursor(&self, key: &[u8]) -> Option<Version> {
        let c = self.cn.cache.borrow();
        let m = c.peek(&key.to_vec())?.borrow();
        m.valid.then(|| m.cursor.clone())
    }

    /// Points `key`'s cached cursor at `version`, as if it had been read
    /// there. Used to stage stale cursors.
    pub fn pin_cursor(&self, key: &[u8], version: Version) -> bool {
        let Some(m) = self.cn.cache.borrow().peek(&key.to_vec()).cloned() else {
            return false;
        };
        let mut m = m.borrow_mut();
        m.cursor = version;
        m.from_head = false;
        m.valid = true;
        m.last_active = self.sim().now();
        true
    }

    /// Bytes this node has exchanged with each device.
    pub fn device_load(&self) -> Vec<u64> {
        self.cn.load.borrow().clone()
    }

    fn note(&self, device: DeviceId, bytes: u64) {
        self.cn.load.borrow_mut()[device as usize] += bytes;
    }

    // ---- metadata server ----

    /// One request/response exchange with the metadata server.
    async fn ms_call<T>(
        &self,
        request: u64,
        response: u64,
        f: impl FnOnce(&mut MetaServer, u64) -> T,
    ) -> Result<T, StoreError> {
        let _permit = self.shared.handlers.acquire().await;
        self.port.rpc(Endpoint::Ms, request, response, 0).await?;
        let now = self.sim().now();
        let out = {
            let mut ms = self.shared.ms.borrow_mut();
            for d in 0..self.sim().device_count() {
                if self.sim().is_dead(d) {
                    ms.mark_dead(d);
                }
            }
            ms.tick(now);
            f(&mut ms, now)
        };
        self.port.rpc_reply(Endpoint::Ms, response, 0);
        self.epoch_broadcast(now);
        Ok(out)
    }

    /// The metadata server's only push: every epoch it tells each node to
    /// drop cursors idle for a full epoch.
    fn epoch_broadcast(&self, now: u64) {
        if !self.shared.ms.borrow_mut().broadcast_due(now) {
            return;
        }
        let floor = now.saturating_sub(self.config().epoch_t);
        for cn in self.shared.cns.borrow().values() {
            self.shared.ms_port.notify(Endpoint::Cn(cn.id), frame_len(0, 8));
            cn.epoch_floor.set(floor);
        }
        self.sim().count("sep.epoch_broadcasts", 1);
    }

    fn resize_cache(&self) {
        let keys = self.shared.ms.borrow().key_count();
        let cap = (keys * self.config().cache_percent as usize).div_ceil(100);
        self.cn.cache.borrow_mut().set_capacity(cap);
    }

    async fn lookup(&self, key: &[u8]) -> Result<MetaRef, StoreError> {
        self.sim().count("sep.lookups", 1);
        let r = self.config().replication;
        let rec = self
            .ms_call(frame_len(key.len(), 0), frame_len(key.len(), 8 * r + 16), |ms, _| {
                ms.lookup(key)
            })
            .await?
            .ok_or(StoreError::KeyNotFound)?;
        let meta = Rc::new(RefCell::new(KeyMeta {
            incarnation: rec.incarnation,
            size: rec.size,
            replication: rec.replication,
            cursor: rec.head,
            from_head: true,
            valid: true,
            last_active: self.sim().now(),
            shortcut: rec.shortcut,
        }));
        self.resize_cache();
        self.cn.cache.borrow_mut().insert(key.to_vec(), meta.clone());
        Ok(meta)
    }

    async fn meta(&self, key: &[u8]) -> Result<MetaRef, StoreError> {
        let hit = self.cn.cache.borrow_mut().get(&key.to_vec());
        match hit {
            Some(m) => Ok(m),
            None => self.lookup(key).await,
        }
    }

    /// A cursor is usable if it was touched within the last epoch.
    fn fresh_cursor(&self, meta: &KeyMeta) -> Option<Version> {
        let now = self.sim().now();
        let live = meta.valid
            && meta.last_active >= self.cn.epoch_floor.get()
            && now - meta.last_active < self.config().epoch_t;
        live.then(|| meta.cursor.clone())
    }

    fn touch(&self, meta: &MetaRef, at: &Version) {
        let mut m = meta.borrow_mut();
        m.last_active = self.sim().now();
        if at.copies.len() == m.replication {
            m.cursor = at.clone();
            m.from_head = false;
            m.valid = true;
        }
    }

    fn forget(&self, key: &[u8]) {
        self.cn.cache.borrow_mut().remove(&key.to_vec());
    }

    // ---- slot buffers ----

    fn take_local(&self, class: u64, r: usize) -> Option<Vec<SlotRef>> {
        let devices = self.sim().device_count() as usize;
        let mut b = self.cn.buffers.borrow_mut();
        let stacks = b.entry(class).or_insert_with(|| vec![Vec::new(); devices]);
        let start = self.cn.rr.get();
        let devs: Vec<usize> = (0..devices)
            .map(|i| (start + i) % devices)
            .filter(|&d| !stacks[d].is_empty() && !self.sim().is_dead(d as DeviceId))
            .take(r)
            .collect();
        if devs.len() < r {
            return None;
        }
        self.cn.rr.set(start + 1);
        Some(devs.into_iter().map(|d| stacks[d].pop().unwrap()).collect())
    }

    fn buffered(&self, class: u64) -> usize {
        self.cn
            .buffers
            .borrow()
            .get(&class)
            .map_or(0, |s| s.iter().map(Vec::len).sum())
    }

    /// `r` slots of `class` on distinct devices; refills in the background
    /// when running low and stalls only when empty.
    async fn take_slots(&self, class: u64, r: usize) -> Result<Vec<SlotRef>, StoreError> {
        if let Some(s) = self.take_local(class, r) {
            if self.buffered(class) < self.config().buffer_low * r && self.cn.refilling.borrow_mut().insert(class) {
                let me = self.clone();
                self.sim().spawn_background(async move {
                    let _ = me.refill(class, r).await;
                    me.cn.refilling.borrow_mut().remove(&class);
                });
            }
            return Ok(s);
        }
        self.sim().count("sep.alloc_stalls", 1);
        self.refill(class, r).await?;
        self.take_local(class, r).ok_or(StoreError::OutOfSpace)
    }

    async fn refill(&self, class: u64, r: usize) -> Result<(), StoreError> {
        let want = (self.config().buffer_high * r)
            .saturating_sub(self.buffered(class))
            .max(r);
        let load = self.device_load();
        let cn = self.cn.id;
        let devices = load.len();
        let slots = self
            .ms_call(
                frame_len(0, 16 + 8 * devices),
                frame_len(0, 16 * want),
                move |ms, now| {
                    ms.report_load(cn, load);
                    ms.alloc(cn, class, want, r, now)
                },
            )
            .await??;
        give_back(&self.cn, class, &Version { copies: slots });
        Ok(())
    }

    // ---- retirement ----

    fn retire(&self, key: &[u8], incarnation: u64, version: Version, successor: Version) {
        queue_retire(
            &self.shared,
            &self.cn,
            Retire {
                key: key.to_vec(),
                incarnation,
                version,
                successor,
            },
        );
        let due = {
            let q = self.cn.retires.borrow();
            q.len() >= self.config().retire_batch
                || self.sim().now() - self.cn.retire_since.get() >= self.config().read_abort_t
        };
        if due && !self.cn.flushing.get() {
            self.cn.flushing.set(true);
            let me = self.clone();
            self.sim().spawn_background(async move {
                let _ = me.flush_retires().await;
                me.cn.flushing.set(false);
            });
        }
    }

    /// Sends every queued retirement to the metadata server.
    pub async fn flush_retires(&self) -> Result<(), StoreError> {
        let batch = std::mem::take(&mut *self.cn.retires.borrow_mut());
        if batch.is_empty() {
            return Ok(());
        }
        let words: usize = batch
            .iter()
            .map(|r| r.version.copies.len() + r.successor.copies.len())
            .sum();
        let load = self.device_load();
        let cn = self.cn.id;
        let req = frame_len(0, 8 * words + 8 * load.len());
        let rejected = self
            .ms_call(req, frame_len(0, 8), move |ms, now| {
                ms.report_load(cn, load);
                ms.retire(batch, now)
            })
            .await?;
        self.sim().count("sep.retire_rejected", rejected as u64);
        Ok(())
    }

    // ---- intents ----

    fn begin(&self, key: &[u8], incarnation: u64, layout: SlotLayout, new: &Version, mark: CommitMark) -> u64 {
        let id = self.shared.next_intent.get();
        self.shared.next_intent.set(id + 1);
        self.shared.intents.borrow_mut().insert(
            id,
            Intent {
                key: key.to_vec(),
                incarnation,
                cn: self.cn.clone(),
                task: self.sim().current_task(),
                layout,
                new: new.clone(),
                tail: None,
                phase: Phase::Writing,
                mark,
            },
        );
        id
    }

    fn stage(&self, id: u64, tail: &Version, phase: Phase) {
        if let Some(i) = self.shared.intents.borrow_mut().get_mut(&id) {
            i.tail = Some(tail.clone());
            i.phase = phase;
        }
    }

    fn end(&self, id: u64) {
        self.shared.intents.borrow_mut().remove(&id);
    }

    /// Drops an intent whose slots were never linked.
    fn abandon(&self, id: u64) {
        if let Some(i) = self.shared.intents.borrow_mut().remove(&id) {
            give_back(&self.cn, i.layout.class(), &i.new);
        }
    }

    // ---- data path ----

    /// Live copies of `v` in read preference order.
    fn copy_order(&self, v: &Version) -> Vec<SlotRef> {
        let mut c: Vec<SlotRef> = v
            .copies
            .iter()
            .copied()
            .filter(|s| !self.sim().is_dead(s.device))
            .collect();
        if self.config().load_balance {
            let load = self.cn.load.borrow();
            c.sort_by_key(|s| load[s.device as usize]);
        }
        c
    }

    async fn read_slot(&self, v: &Version, layout: SlotLayout) -> Result<(SlotRef, SlotView), StoreError> {
        let mut last = FabricError::DeviceUnavailable(v.primary().device);
        for c in self.copy_order(v) {
            match self.port.read(c.device, c.address, layout.slot_len()).await {
                Ok(b) => {
                    self.note(c.device, 16 + layout.slot_len());
                    return Ok((c, layout.decode(&b)));
                }
                Err(e) => last = e,
            }
        }
        Err(last.into())
    }

    /// Header and links of one live copy of `v`, with the copy read.
    async fn read_links(&self, v: &Version, layout: SlotLayout) -> Result<(SlotRef, SlotView), StoreError> {
        let mut last = FabricError::DeviceUnavailable(v.primary().device);
        for c in self.copy_order(v) {
            match self.port.read(c.device, c.address, layout.links_len()).await {
                Ok(b) => {
                    self.note(c.device, 16 + layout.links_len());
                    return Ok((c, layout.decode(&b)));
                }
                Err(e) => last = e,
            }
        }
        Err(last.into())
    }

    fn elapsed(&self, start: u64) -> bool {
        self.sim().now() - start > self.config().read_abort_t
    }

    async fn get_once(&self, key: &[u8], restart: bool) -> Flow<Vec<u8>> {
        let meta = match if restart {
            self.lookup(key).await
        } else {
            self.meta(key).await
        } {
            Ok(m) => m,
            Err(e) => return Flow::Done(Err(e)),
        };
        let start = self.sim().now();
        let (layout, sc_loc, cursor, head) = {
            let m = meta.borrow();
            let cursor = if m.from_head { None } else { self.fresh_cursor(&m) };
            (
                SlotLayout::new(m.replication, m.size),
                m.shortcut,
                cursor,
                m.cursor.clone(),
            )
        };
        let tag = key_tag(key);
        let mut reqs = vec![OpRequest::Read {
            device: sc_loc.0,
            address: sc_loc.1,
            len: 8,
        }];
        let first = cursor.as_ref().and_then(|c| self.copy_order(c).first().copied());
        if let Some(c) = first {
            reqs.push(OpRequest::Read {
                device: c.device,
                address: c.address,
                len: layout.slot_len(),
            });
        }
        let mut res = self.port.batch(reqs).await.into_iter();
        let sc = word(res.next().unwrap()).ok().and_then(decode_shortcut);
        self.note(sc_loc.0, 24);
        let mut pre = first.zip(res.next());

        let (mut pos, mut jump, mut fallback) = match (cursor, sc) {
            (Some(c), sc) => (c, sc.map(one), None),
            (None, Some(s)) => (one(s), None, Some(head)),
            (None, None) => (head, None, None),
        };
        loop {
            if self.elapsed(start) {
                return Flow::Restart;
            }
            let read = match pre.take() {
                Some((c, Ok(out))) => {
                    self.note(c.device, 16 + layout.slot_len());
                    Ok((c, layout.decode(&out.into_bytes())))
                }
                _ => self.read_slot(&pos, layout).await,
            };
            let hop = match read {
                Ok((copy, view)) => classify(&view, copy, tag),
                Err(e) => match fallback.take() {
                    Some(f) => {
                        pos = f;
                        continue;
                    }
                    None => return Flow::Done(Err(e)),
                },
            };
            match hop {
                Hop::Tail(p) => {
                    self.touch(&meta, &pos);
                    return Flow::Done(Ok(p));
                }
                Hop::Deleted => {
                    self.forget(key);
                    return Flow::Done(Err(StoreError::KeyNotFound));
                }
                Hop::Busy => {
                    self.sim().count("sep.read_spins", 1);
                    self.sim().yield_spin().await;
                }
                Hop::Stale => match fallback.take() {
                    Some(f) => pos = f,
                    None => return Flow::Restart,
                },
                Hop::Next(n) => match jump.take() {
                    Some(s) if s.primary() != n.primary() && s.primary() != pos.primary() => {
                        pos = s;
                        fallback = Some(n);
                    }
                    _ => {
                        pos = n;
                        fallback = None;
                    }
                },
            }
        }
    }

    /// Where an append should try first: (start, shortcut to try on a
    /// failed CAS, position to fall back to if the start is stale).
    fn append_start(&self, meta: &KeyMeta, sc: Option<SlotRef>) -> (Version, Option<Version>, Option<Version>) {
        let cursor = if meta.from_head { None } else { self.fresh_cursor(meta) };
        match (cursor, sc) {
            (Some(c), sc) => (c, sc.map(one), None),
            (None, Some(s)) => (one(s), None, Some(meta.cursor.clone())),
            (None, None) => (meta.cursor.clone(), None, None),
        }
    }

    /// Fresh head of `key`; fails if the key was deleted (and maybe
    /// recreated) since `incarnation` was read.
    async fn refetch(&self, key: &[u8], incarnation: u64) -> Result<Version, StoreError> {
        self.sim().count("sep.refetches", 1);
        let m = self.lookup(key).await?;
        let m = m.borrow();
        if m.incarnation != incarnation {
            return Err(StoreError::KeyNotFound);
        }
        Ok(m.cursor.clone())
    }

    async fn put_single(&self, key: &[u8], value: &[u8], meta: MetaRef, layout: SlotLayout) -> Result<(), StoreError> {
        let slot = self.take_slots(layout.class(), 1).await?.pop().unwrap();
        let new = one(slot);
        let mark = commit_mark(key, value);
        let inc = meta.borrow().incarnation;
        let id = self.begin(key, inc, layout, &new, mark.clone());
        let data = layout.encode(slot.gc, key, value);
        let last = data.len() as u64 - 1;
        let sc_loc = meta.borrow().shortcut;
        self.note(slot.device, 16 + data.len() as u64);
        let mut res = self
            .port
            .batch(vec![
                OpRequest::Write {
                    device: slot.device,
                    address: slot.address,
                    data,
                },
                OpRequest::Read {
                    device: sc_loc.0,
                    address: sc_loc.1,
                    len: 8,
                },
            ])
            .await
            .into_iter();
        let wrote = res.next().unwrap();
        let sc = word(res.next().unwrap()).ok().and_then(decode_shortcut);
        if let Err(e) = wrote.and(self.port.read(slot.device, slot.address + last, 1).await.map(|_| ())) {
            self.abandon(id);
            return Err(e.into());
        }
        let (mut pos, mut jump, mut fallback) = self.append_start(&meta.borrow(), sc);
        loop {
            let p = pos.primary();
            self.stage(id, &pos, Phase::Writing);
            let expect = Header::tail(p.gc).encode();
            let cas = OpRequest::Cas {
                device: p.device,
                address: p.address,
                expect,
                new: Header::linked_to(slot, p.gc).encode(),
            };
            let old = self
                .port
                .batch_commit(vec![cas], mark.clone())
                .await
                .pop()
                .unwrap()?
                .cas_old();
            self.note(p.device, 40);
            if old == expect {
                break;
            }
            let h = Header::decode(old);
            if h.gc != p.gc {
                pos = match (jump.take(), fallback.take()) {
                    (Some(s), _) | (None, Some(s)) => s,
                    (None, None) => match self.refetch(key, inc).await {
                        Ok(v) => v,
                        Err(e) => {
                            self.abandon(id);
                            return Err(e);
                        }
                    },
                };
            } else if h.is_tombstone() {
                self.abandon(id);
                self.forget(key);
                return Err(StoreError::KeyNotFound);
            } else if let Some(next) = h.next() {
                self.sim().count("sep.cas_retries", 1);
                fallback = None;
                pos = match jump.take() {
                    Some(s) if s.primary() != next && s.primary() != p => {
                        fallback = Some(one(next));
                        s
                    }
                    _ => one(next),
                };
            } else {
                self.sim().yield_spin().await;
            }
        }
        self.end(id);
        self.touch(&meta, &new);
        self.port
            .post_write(sc_loc.0, sc_loc.1, shortcut_word(slot).to_le_bytes().to_vec());
        self.retire(key, inc, pos, new);
        Ok(())
    }

    async fn put_replicated(
        &self,
        key: &[u8],
        value: &[u8],
        meta: MetaRef,
        layout: SlotLayout,
    ) -> Result<(), StoreError> {
        let r = layout.replication;
        let slots = self.take_slots(layout.class(), r).await?;
        let new = Version { copies: slots.clone() };
        let mark = commit_mark(key, value);
        let inc = meta.borrow().incarnation;
        let id = self.begin(key, inc, layout, &new, mark.clone());
        let mut pos = {
            let m = meta.borrow();
            self.fresh_cursor(&m).unwrap_or_else(|| m.cursor.clone())
        };
        let mut ops: Vec<OpRequest> = slots
            .iter()
            .map(|s| {
                let data = layout.encode(s.gc, key, value);
                self.note(s.device, 16 + data.len() as u64);
                OpRequest::Write {
                    device: s.device,
                    address: s.address,
                    data,
                }
            })
            .collect();
        let mut wrote = false;
        // Round 1 writes the copies and takes B_w on the tail together.
        loop {
            let p = pos.primary();
            let expect = Header::tail(p.gc).encode();
            let held = Header {
                bw: true,
                ..Header::tail(p.gc)
            }
            .encode();
            ops.push(OpRequest::Cas {
                device: p.device,
                address: p.address,
                expect,
                new: held,
            });
            self.note(p.device, 40);
            let mut res = self.port.batch(std::mem::take(&mut ops)).await;
            let cas = res.pop().unwrap();
            if !wrote {
                if let Some(e) = res.into_iter().find_map(Result::err) {
                    if cas.as_ref().is_ok_and(|o| o.cas_old() == expect) {
                        self.stage(id, &pos, Phase::BwHeld);
                    }
                    if self.shared.intents.borrow()[&id].phase == Phase::Writing {
                        self.abandon(id);
                    }
                    return Err(e.into());
                }
                wrote = true;
            }
            let old = match cas {
                Ok(o) => o.cas_old(),
                Err(e) => {
                    self.abandon(id);
                    return Err(e.into());
                }
            };
            if old == expect {
                self.stage(id, &pos, Phase::BwHeld);
                break;
            }
            let h = Header::decode(old);
            if h.gc != p.gc {
                pos = match self.refetch(key, inc).await {
                    Ok(v) => v,
                    Err(e) => {
                        self.abandon(id);
                        return Err(e);
                    }
                };
            } else if h.is_tombstone() {
                self.abandon(id);
                self.forget(key);
                return Err(StoreError::KeyNotFound);
            } else if h.next().is_none() {
                self.sim().count("sep.bw_waits", 1);
                self.sim().yield_spin().await;
            } else {
                self.sim().count("sep.cas_retries", 1);
                loop {
                    let (copy, view) = match self.read_links(&pos, layout).await {
                        Ok(v) => v,
                        Err(e) => {
                            self.abandon(id);
                            return Err(e);
                        }
                    };
                    // Copies of one version carry their own GC versions.
                    if view.header.rep || view.header.gc != copy.gc {
                        self.sim().yield_spin().await;
                        if view.header.gc != copy.gc {
                            break;
                        }
                        continue;
                    }
                    match view.next() {
                        Some(n) if n.copies.len() == r => pos = n,
                        _ => self.sim().yield_spin().await,
                    }
                    break;
                }
            }
        }
        // Round 2: validation.
        let last = layout.encode(0, key, value).len() as u64 - 1;
        let reads = slots
            .iter()
            .map(|s| OpRequest::Read {
                device: s.device,
                address: s.address + last,
                len: 1,
            })
            .collect();
        for res in self.port.batch(reads).await {
            res?;
        }
        // Round 3: link every live copy of the tail; the commit point.
        let tail: Vec<SlotRef> = pos
            .copies
            .iter()
            .copied()
            .filter(|c| !self.sim().is_dead(c.device))
            .collect();
        let pending: Vec<u64> = tail
            .iter()
            .map(|c| {
                Header {
                    bw: *c == pos.primary(),
                    rep: true,
                    ..Header::linked_to(new.primary(), c.gc)
                }
                .encode()
            })
            .collect();
        let links = tail
            .iter()
            .zip(&pending)
            .map(|(c, h)| {
                self.note(c.device, 16 + layout.links_len());
                OpRequest::Write {
                    device: c.device,
                    address: c.address,
                    data: layout.encode_links(Header::decode(*h), &new),
                }
            })
            .collect();
        let res = self.port.batch_commit(links, mark).await;
        if res.iter().any(Result::is_ok) {
            self.stage(id, &pos, Phase::Linked);
        }
        for r in res {
            r?;
        }
        // Round 4: clear B_w and repbit. The CAS also makes round 3 durable.
        let clear = tail
            .iter()
            .zip(&pending)
            .map(|(c, h)| OpRequest::Cas {
                device: c.device,
                address: c.address,
                expect: *h,
                new: Header::linked_to(new.primary(), c.gc).encode(),
            })
            .collect();
        for r in self.port.batch(clear).await {
            r?;
        }
        self.end(id);
        self.touch(&meta, &new);
        let sc_loc = meta.borrow().shortcut;
        self.port
            .post_write(sc_loc.0, sc_loc.1, shortcut_word(new.primary()).to_le_bytes().to_vec());
        self.retire(key, inc, pos, new);
        Ok(())
    }

    /// Creates `key` with its own replication factor.
    pub async fn create_with(&self, key: &[u8], size: u64, replication: usize) -> Result<(), StoreError> {
        let layout = SlotLayout::new(replication, size);
        let cn = self.cn.id;
        let (head, sc) = self
            .ms_call(
                frame_len(key.len(), 16),
                frame_len(key.len(), 8 * replication + 16),
                |ms, now| ms.reserve(cn, key, layout.class(), replication, now),
            )
            .await??;
        let zeros = vec![0; size as usize];
        let mut writes: Vec<OpRequest> = head
            .copies
            .iter()
            .map(|s| OpRequest::Write {
                device: s.device,
                address: s.address,
                data: layout.encode(s.gc, key, &zeros),
            })
            .collect();
        writes.push(OpRequest::Write {
            device: sc.0,
            address: sc.1,
            data: shortcut_word(head.primary()).to_le_bytes().to_vec(),
        });
        let mut checks: Vec<OpRequest> = head
            .copies
            .iter()
            .map(|s| OpRequest::Read {
                device: s.device,
                address: s.address + layout.slot_len() - 1,
                len: 1,
            })
            .collect();
        checks.push(OpRequest::Read {
            device: sc.0,
            address: sc.1 + 7,
            len: 1,
        });
        let mut failed = None;
        for r in self.port.batch(writes).await {
            failed = failed.or(r.err());
        }
        if failed.is_none() {
            for r in self.port.batch(checks).await {
                failed = failed.or(r.err());
            }
        }
        let (h, k, ok) = (head.clone(), key.to_vec(), failed.is_none());
        let res = self
            .ms_call(
                frame_len(key.len(), 16 * replication + 16),
                frame_len(key.len(), 0),
                move |ms, now| {
                    if !ok {
                        for s in &h.copies {
                            ms.release(*s);
                        }
                        ms.free_shortcut(sc);
                        return Ok(None);
                    }
                    ms.register(&k, size, replication, h, sc, now).map(Some)
                },
            )
            .await?;
        let rec = match res {
            Ok(Some(rec)) => rec,
            Ok(None) => return Err(failed.unwrap().into()),
            Err(e) => return Err(e),
        };
        self.resize_cache();
        self.cn.cache.borrow_mut().insert(
            key.to_vec(),
            Rc::new(RefCell::new(KeyMeta {
                incarnation: rec.incarnation,
                size,
                replication,
                cursor: rec.head,
                from_head: false,
                valid: true,
                last_active: self.sim().now(),
                shortcut: sc,
            })),
        );
        Ok(())
    }
}

impl KvStore for SepClient {
    fn kind(&self) -> StoreKind {
        StoreKind::Sep
    }

    async fn create(&self, key: &[u8], size: u64) -> Result<(), StoreError> {
        self.create_with(key, size, self.config().replication).await
    }

    async fn put(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        let cached = self.is_cached(key);
        match self.put_inner(key, value).await {
            Err(StoreError::KeyNotFound | StoreError::ValueTooLarge { .. }) if cached => {
                self.stale_retry(key);
                self.put_inner(key, value).await
            }
            r => r,
        }
    }

    async fn get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        let cached = self.is_cached(key);
        match self.get_inner(key).await {
            Err(StoreError::KeyNotFound) if cached => {
                self.stale_retry(key);
                self.get_inner(key).await
            }
            r => r,
        }
    }

    async fn del(&self, key: &[u8]) -> Result<(), StoreError> {
        let cached = self.is_cached(key);
        match self.del_inner(key).await {
            Err(StoreError::KeyNotFound) if cached => {
                self.stale_retry(key);
                self.del_inner(key).await
            }
            r => r,
        }
    }
}

impl SepClient {
    fn is_cached(&self, key: &[u8]) -> bool {
        self.cn.cache.borrow().contains(&key.to_vec())
    }

    /// A cached entry can outlive a delete or a re-create by another
    /// client; such failures are retried once from a fresh lookup.
    fn stale_retry(&self, key: &[u8]) {
        self.sim().count("sep.stale_retries", 1);
        self.forget(key);
    }

    async fn put_inner(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        let meta = self.meta(key).await?;
        let (size, r) = {
            let m = meta.borrow();
            (m.size, m.replication)
        };
        if value.len() as u64 > size {
            return Err(StoreError::ValueTooLarge { len: value.len(), size });
        }
        let layout = SlotLayout::new(r, size);
        if r == 1 {
            self.put_single(key, value, meta, layout).await
        } else {
            self.put_replicated(key, value, meta, layout).await
        }
    }

    async fn get_inner(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        let mut restarts = 0;
        loop {
            match self.get_once(key, restarts > 0).await {
                Flow::Done(r) => return r,
                Flow::Restart => {
                    self.sim().count("sep.read_restarts", 1);
                    restarts += 1;
                    if restarts > MAX_RESTARTS {
                        return Err(StoreError::ReadTimeout);
                    }
                }
            }
        }
    }

    async fn del_inner(&self, key: &[u8]) -> Result<(), StoreError> {
        let meta = self.meta(key).await?;
        let (layout, sc_loc, inc) = {
            let m = meta.borrow();
            (SlotLayout::new(m.replication, m.size), m.shortcut, m.incarnation)
        };
        let sc = if layout.replication == 1 {
            self.port
                .read_u64(sc_loc.0, sc_loc.1)
                .await
                .ok()
                .and_then(decode_shortcut)
        } else {
            None
        };
        let (mut pos, mut jump, mut fallback) = self.append_start(&meta.borrow(), sc);
        loop {
            let p = pos.primary();
            let expect = Header::tail(p.gc).encode();
            let old = self
                .port
                .cas(p.device, p.address, expect, Header::tombstone(p.gc).encode())
                .await?;
            if old == expect {
                break;
            }
            let h = Header::decode(old);
            if h.gc != p.gc {
                pos = match (jump.take(), fallback.take()) {
                    (Some(s), _) | (None, Some(s)) => s,
                    (None, None) => self.refetch(key, inc).await?,
                };
            } else if h.is_tombstone() {
                self.forget(key);
                return Err(StoreError::KeyNotFound);
            } else if h.next().is_none() || h.rep {
                self.sim().yield_spin().await;
            } else if layout.replication == 1 {
                pos = match jump.take() {
                    Some(s) if Some(s.primary()) != h.next() => s,
                    _ => one(h.next().unwrap()),
                };
            } else {
                let (copy, view) = self.read_links(&pos, layout).await?;
                match view.next() {
                    Some(n) if view.header.gc == copy.gc && n.copies.len() == layout.replication => pos = n,
                    _ => self.sim().yield_spin().await,
                }
            }
        }
        if layout.replication > 1 {
            let rest = pos
                .copies
                .iter()
                .skip(1)
                .filter(|c| !self.sim().is_dead(c.device))
                .map(|c| OpRequest::Cas {
                    device: c.device,
                    address: c.address,
                    expect: Header::tail(c.gc).encode(),
                    new: Header::tombstone(c.gc).encode(),
                })
                .collect();
            self.port.batch(rest).await;
        }
        self.forget(key);
        let k = key.to_vec();
        let words = 8 * pos.copies.len();
        self.ms_call(frame_len(key.len(), words), frame_len(key.len(), 0), move |ms, now| {
            ms.delete(&k, inc, &pos, now)
        })
        .await??;
        self.resize_cache();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{LinkClass, SimConfig};

    fn setup(devices: u16, cfg: SepConfig) -> (Sim, SepStore) {
        let sim = Sim::new(SimConfig::with_devices(devices));
        let store = SepStore::new(&sim, cfg);
        (sim, store)
    }

    fn rtts_of<T: 'static>(sim: &Sim, f: impl std::future::Future<Output = T> + 'static) -> (T, u64) {
        let h = sim.spawn_with_result(f);
        sim.run().unwrap();
        let rtts = sim.task_rtts(h.task());
        (h.take().unwrap(), rtts)
    }

    fn run<T: 'static>(sim: &Sim, f: impl std::future::Future<Output = T> + 'static) -> T {
        sim.block_on(f).unwrap()
    }

    fn payloads(store: &SepStore, key: &[u8]) -> Vec<Vec<u8>> {
        store.chain(key, |v| v.copies.clone()).unwrap()
    }

    #[test]
    fn uncontended_round_trips() {
        for r in [1, 3] {
            let (sim, store) = setup(
                3,
                SepConfig {
                    replication: r,
                    ..Default::default()
                },
            );
            let c = store.client(0);
            let c2 = c.clone();
            let (res, rounds) = rtts_of(&sim, async move { c2.create(b"k", 64).await });
            res.unwrap();
            assert_eq!(rounds, 4);
            let c2 = c.clone();
            run(&sim, async move { c2.put(b"k", &[1; 64]).await.unwrap() });
            let c2 = c.clone();
            let (res, w) = rtts_of(&sim, async move { c2.put(b"k", &[2; 64]).await });
            res.unwrap();
            assert_eq!(w, if r == 1 { 3 } else { 4 }, "R={r}");
            let c2 = c.clone();
            let (got, rd) = rtts_of(&sim, async move { c2.get(b"k").await });
            assert_eq!(got.unwrap(), vec![2; 64]);
            assert_eq!(rd, 1, "R={r}");
            assert_eq!(sim.meter().link_bytes(LinkClass::MsDpm), 0);
        }
    }

    #[test]
    fn chain_holds_versions_in_commit_order() {
        let (sim, store) = setup(2, SepConfig::default());
        let c = store.client(0);
        run(&sim, async move {
            c.create(b"k", 8).await.unwrap();
            for i in 1..=5u8 {
                c.put(b"k", &[i; 8]).await.unwrap();
            }
        });
        let want: Vec<Vec<u8>> = (0..=5u8).map(|i| vec![i; 8]).collect();
        assert_eq!(payloads(&store, b"k"), want);
    }

    #[test]
    fn shortcut_skips_a_stale_cursor() {
        let (sim, store) = setup(2, SepConfig::default());
        let (a, b) = (store.client(0), store.client(1));
        let a2 = a.clone();
        run(&sim, async move {
            a2.create(b"k", 8).await.unwrap();
            a2.get(b"k").await.unwrap();
        });
        let b2 = b.clone();
        run(&sim, async move {
            for i in 1..=6u8 {
                b2.put(b"k", &[i; 8]).await.unwrap();
            }
        });
        let (got, rounds) = rtts_of(&sim, async move { a.get(b"k").await });
        assert_eq!(got.unwrap(), vec![6; 8]);
        assert_eq!(rounds, 2);
    }

    #[test]
    fn racing_appends_both_land() {
        for seed in 0..8 {
            let sim = Sim::new(SimConfig {
                seed,
                ..SimConfig::with_devices(2)
            });
            let store = SepStore::new(&sim, SepConfig::default());
            let (a, b) = (store.client(0), store.client(1));
            let a2 = a.clone();
            let b2 = b.clone();
            run(&sim, async move {
                a2.create(b"k", 8).await.unwrap();
                b2.get(b"k").await.unwrap();
                a2.put(b"k", &[9; 8]).await.unwrap();
            });
            sim.spawn(async move { a.put(b"k", &[1; 8]).await.unwrap() });
            sim.spawn(async move { b.put(b"k", &[2; 8]).await.unwrap() });
            sim.run().unwrap();
            let chain = payloads(&store, b"k");
            assert_eq!(chain.len(), 4);
            let mut tail: Vec<u8> = chain[2..].iter().map(|v| v[0]).collect();
            tail.sort();
            assert_eq!(tail, vec![1, 2]);
        }
    }

    #[test]
    fn reused_slot_is_never_read_through_a_stale_cursor() {
        let (sim, store) = setup(1, SepConfig::default());
        let (a, b) = (store.client(0), store.client(1));
        let a2 = a.clone();
        let old = run(&sim, async move {
            a2.create(b"a", 8).await.unwrap();
            a2.get(b"a").await.unwrap();
            a2.cursor(b"a").unwrap()
        });
        let b2 = b.clone();
        run(&sim, async move {
            for i in 1..=40u8 {
                b2.put(b"a", &[i; 8]).await.unwrap();
            }
            b2.flush_retires().await.unwrap();
        });
        sim.advance(100);
        let b2 = b.clone();
        run(&sim, async move {
            b2.create(b"b", 8).await.unwrap();
            for i in 1..=40u8 {
                b2.put(b"b", &[100 + i; 8]).await.unwrap();
            }
        });
        let (dev, addr) = old.primary().slot();
        let (_, gc) = store.with_ms(|ms| ms.slot_state(dev, addr)).unwrap();
        assert!(gc > old.primary().gc, "slot was recycled");
        assert!(a.pin_cursor(b"a", old));
        let got = run(&sim, async move { a.get(b"a").await });
        assert_eq!(got.unwrap(), vec![40; 8]);
    }

    #[test]
    fn delete_and_recreate() {
        let (sim, store) = setup(2, SepConfig::default());
        let (a, b) = (store.client(0), store.client(1));
        let b2 = b.clone();
        run(&sim, async move {
            a.create(b"k", 8).await.unwrap();
            b2.put(b"k", &[1; 8]).await.unwrap();
            assert_eq!(a.create(b"k", 8).await, Err(StoreError::KeyExists));
            a.del(b"k").await.unwrap();
            assert_eq!(a.get(b"k").await, Err(StoreError::KeyNotFound));
            assert_eq!(b2.put(b"k", &[2; 8]).await, Err(StoreError::KeyNotFound));
            a.create(b"k", 8).await.unwrap();
            assert_eq!(b2.get(b"k").await.unwrap(), vec![0; 8]);
        });
        assert!(store.record(b"k").is_some());
    }

    #[test]
    fn stale_size_after_recreate() {
        let (sim, store) = setup(2, SepConfig::default());
        let (a, b) = (store.client(0), store.client(1));
        run(&sim, async move {
            a.create(b"k", 8).await.unwrap();
            b.put(b"k", &[1; 8]).await.unwrap();
            a.del(b"k").await.unwrap();
            assert_eq!(b.put(b"k", &[2; 9]).await, Err(StoreError::KeyNotFound));
            a.create(b"k", 16).await.unwrap();
            b.put(b"k", &[3; 16]).await.unwrap();
            assert_eq!(a.get(b"k").await.unwrap(), vec![3; 16]);
            a.del(b"k").await.unwrap();
            a.create(b"k", 4).await.unwrap();
            assert_eq!(
                b.put(b"k", &[4; 8]).await,
                Err(StoreError::ValueTooLarge { len: 8, size: 4 })
            );
            assert_eq!(a.get(b"k").await.unwrap(), vec![0; 4]);
        });
    }

    #[test]
    fn value_too_large_and_missing_key() {
        let (sim, store) = setup(1, SepConfig::default());
        let c = store.client(0);
        run(&sim, async move {
            assert_eq!(c.get(b"x").await, Err(StoreError::KeyNotFound));
            c.create(b"x", 4).await.unwrap();
            assert_eq!(
                c.put(b"x", &[0; 5]).await,
                Err(StoreError::ValueTooLarge { len: 5, size: 4 })
            );
        });
    }

    #[test]
    fn zero_cache_pays_one_lookup_per_op() {
        let (sim, store) = setup(
            2,
            SepConfig {
                cache_percent: 0,
                ..Default::default()
            },
        );
        let c = store.client(0);
        let c2 = c.clone();
        run(&sim, async move {
            c2.create(b"k", 8).await.unwrap();
            c2.put(b"k", &[1; 8]).await.unwrap();
        });
        let before = sim.counter("sep.lookups");
        run(&sim, async move {
            for i in 0..10u8 {
                c.put(b"k", &[i; 8]).await.unwrap();
                assert_eq!(c.get(b"k").await.unwrap(), vec![i; 8]);
            }
        });
        assert_eq!(sim.counter("sep.lookups") - before, 20);
    }

    #[test]
    fn head_advances_and_space_is_recycled() {
        let (sim, store) = setup(1, SepConfig::default());
        let c = store.client(0);
        let c2 = c.clone();
        run(&sim, async move {
            c2.create(b"k", 8).await.unwrap();
            for i in 0..100u8 {
                c2.put(b"k", &[i; 8]).await.unwrap();
            }
            c2.flush_retires().await.unwrap();
        });
        assert_eq!(payloads(&store, b"k"), vec![vec![99; 8]]);
        sim.advance(1000);
        run(&sim, async move {
            for i in 0..100u8 {
                c.put(b"k", &[i; 8]).await.unwrap();
            }
        });
        let carved = store.with_ms(|ms| ms.slot_count());
        assert!(carved < 100, "{carved} slots for 200 puts");
    }

    #[test]
    fn contended_replicated_puts_over_recycled_slots() {
        let (sim, store) = setup(
            4,
            SepConfig {
                replication: 3,
                ..Default::default()
            },
        );
        let c = store.client(0);
        let c2 = c.clone();
        run(&sim, async move {
            c2.create(b"k", 8).await.unwrap();
            for round in 0..3u8 {
                for i in 0..60u8 {
                    c2.put(b"k", &[i ^ round; 8]).await.unwrap();
                }
                c2.flush_retires().await.unwrap();
                c2.sim().advance(1000);
            }
        });
        // Recycling leaves the copies of one version with unequal GC versions.
        let mixed = || {
            let v = c.cursor(b"k").unwrap();
            v.copies.iter().any(|s| s.gc != v.primary().gc)
        };
        let mut spins = 0;
        while !mixed() && spins < 64 {
            let c2 = c.clone();
            run(&sim, async move { c2.put(b"k", &[0xee; 8]).await.unwrap() });
            spins += 1;
        }
        assert!(mixed(), "no version with mixed GC versions");
        let writers: Vec<_> = (0..4u16)
            .map(|w| {
                let c = store.client(w);
                sim.spawn(async move {
                    for i in 0..20u8 {
                        c.put(b"k", &[w as u8 * 32 + i; 8]).await.unwrap();
                    }
                })
            })
            .collect();
        sim.run().unwrap();
        assert!(writers.iter().all(|t| sim.is_done(*t)));
        let tail = payloads(&store, b"k").pop().unwrap();
        assert!(tail[0] % 32 == 19, "last put of some writer wins: {tail:?}");
    }

    #[test]
    fn replicated_chain_survives_losing_copies() {
        let (sim, store) = setup(
            3,
            SepConfig {
                replication: 3,
                ..Default::default()
            },
        );
        let c = store.client(0);
        run(&sim, async move {
            c.create(b"k", 16).await.unwrap();
            for i in 1..=4u8 {
                c.put(b"k", &[i; 16]).await.unwrap();
            }
        });
        let full = payloads(&store, b"k");
        for keep in 0..3 {
            let got = store
                .chain(b"k", |v| {
                    v.copies.iter().copied().filter(|c| c.device == keep).collect()
                })
                .unwrap();
            assert_eq!(got, full);
        }
    }

    #[test]
    fn lb_off_reads_primary_only() {
        let (sim, store) = setup(
            2,
            SepConfig {
                replication: 2,
                load_balance: false,
                ..Default::default()
            },
        );
        let c = store.client(0);
        let c2 = c.clone();
        run(&sim, async move { c2.create(b"k", 512).await.unwrap() });
        let before = sim.meter();
        run(&sim, async move {
            for _ in 0..20 {
                c.get(b"k").await.unwrap();
            }
        });
        let m = sim.meter().since(&before);
        assert!(m.device_bytes(1) < m.device_bytes(0) / 10);
    }
}
