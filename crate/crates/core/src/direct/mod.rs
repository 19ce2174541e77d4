//! Direct-connection stores: clients read and write entries in place with
//! one-sided operations. Each entry has a committed and an uncommitted
//! (redo) space; writers serialise on a lock word at the start of the
//! committed space.

pub mod layout;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::alloc::{BumpAllocator, Region};
use crate::api::{commit_mark, Key, KvStore, StoreError, StoreKind};
use crate::fabric::{CommitMark, DeviceId, Endpoint, FabricError, OpOutput, OpRequest, Port, Sim};
use crate::registry::Registry;

pub use layout::{Layout, Variant};

/// Endpoint used by recovery tasks.
pub const RECOVERY_CN: u16 = u16::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Replica {
    pub committed: Region,
    pub uncommitted: Region,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectEntry {
    pub size: u64,
    pub layout: Layout,
    pub replicas: Vec<Replica>,
}

#[derive(Clone, Copy, Debug)]
pub struct DirectConfig {
    pub variant: Variant,
    pub replication: usize,
    /// Delay before freed spaces are reused.
    pub quarantine: u64,
}

impl DirectConfig {
    pub fn new(variant: Variant) -> Self {
        DirectConfig {
            variant,
            replication: 1,
            quarantine: 64,
        }
    }
}

struct Shared {
    sim: Sim,
    config: DirectConfig,
    registry: Registry<Rc<DirectEntry>>,
    alloc: RefCell<BumpAllocator>,
    next_primary: Cell<u16>,
    counters: RefCell<HashMap<u16, u64>>,
    holders: Cell<u32>,
    max_holders: Cell<u32>,
}

/// Store-wide state: the entry registry and the space allocator.
#[derive(Clone)]
pub struct DirectStore(Rc<Shared>);

/// One compute node's handle.
#[derive(Clone)]
pub struct DirectClient {
    shared: Rc<Shared>,
    port: Port,
    cn: u16,
}

fn all_ok(results: Vec<Result<OpOutput, FabricError>>) -> Result<Vec<OpOutput>, StoreError> {
    results.into_iter().map(|r| r.map_err(StoreError::from)).collect()
}

impl DirectStore {
    pub fn new(sim: &Sim, config: DirectConfig) -> DirectStore {
        let devices = sim.device_count();
        assert!(config.replication >= 1 && config.replication <= devices as usize);
        let capacity = sim.with_device(0, |d| d.capacity());
        DirectStore(Rc::new(Shared {
            sim: sim.clone(),
            config,
            registry: Registry::new(),
            alloc: RefCell::new(BumpAllocator::new(devices, 64, capacity, config.quarantine)),
            next_primary: Cell::new(0),
            counters: RefCell::new(HashMap::new()),
            holders: Cell::new(0),
            max_holders: Cell::new(0),
        }))
    }

    pub fn client(&self, cn: u16) -> DirectClient {
        DirectClient {
            shared: self.0.clone(),
            port: Port::new(&self.0.sim, Endpoint::Cn(cn)),
            cn,
        }
    }

    pub fn variant(&self) -> Variant {
        self.0.config.variant
    }

    pub fn entry(&self, key: &[u8]) -> Option<Rc<DirectEntry>> {
        self.0.registry.get(key)
    }

    pub fn entries(&self) -> Vec<(Key, Rc<DirectEntry>)> {
        self.0.registry.entries()
    }

    /// DPM bytes held by live entries on `device`.
    pub fn allocated(&self, device: DeviceId) -> u64 {
        self.0.alloc.borrow().in_use(device)
    }

    /// Largest number of clients ever seen inside a locked section at once.
    pub fn max_lock_holders(&self) -> u32 {
        self.0.max_holders.get()
    }

    /// Repairs every entry with a replica on `device` after the device came
    /// back: a torn committed frame is rolled forward from the redo copy,
    /// and all lock words are cleared. Must run in a task.
    pub async fn recover(&self, device: DeviceId) -> Result<(), StoreError> {
        let port = Port::new(&self.0.sim, Endpoint::Cn(RECOVERY_CN));
        for (_, entry) in self.entries() {
            for rep in entry.replicas.iter().filter(|r| r.committed.device == device) {
                recover_replica(&port, &entry.layout, rep).await?;
            }
        }
        Ok(())
    }
}

async fn recover_replica(port: &Port, layout: &Layout, rep: &Replica) -> Result<(), StoreError> {
    let c = rep.committed;
    let u = rep.uncommitted;
    let space = port.read(c.device, c.address, layout.space_size()).await?;
    let lock = u64::from_le_bytes(space[..8].try_into().unwrap());
    let mut dirty = false;
    if layout.decode(&space[8..]).is_none() {
        let redo = port
            .read(u.device, u.address + Layout::FRAME_OFFSET, layout.frame_len())
            .await?;
        if layout.decode(&redo).is_none() {
            return Err(StoreError::BothSpacesCorrupt(c.device));
        }
        port.write(c.device, c.address + Layout::FRAME_OFFSET, redo).await?;
        dirty = true;
    }
    if lock != 0 {
        port.write(c.device, c.address, vec![0; 8]).await?;
        dirty = true;
    }
    if dirty {
        port.read(c.device, c.address + layout.last_byte(), 1).await?;
    }
    Ok(())
}

impl DirectClient {
    pub fn cn(&self) -> u16 {
        self.cn
    }

    pub fn port(&self) -> &Port {
        &self.port
    }

    fn sim(&self) -> &Sim {
        &self.shared.sim
    }

    fn entry(&self, key: &[u8]) -> Result<Rc<DirectEntry>, StoreError> {
        self.shared.registry.get(key).ok_or(StoreError::KeyNotFound)
    }

    fn next_tag(&self) -> u64 {
        let mut c = self.shared.counters.borrow_mut();
        let n = c.entry(self.cn).or_insert(0);
        *n += 1;
        ((self.cn as u64 + 1) << 48) | *n
    }

    fn live<'a>(&self, entry: &'a DirectEntry) -> Vec<&'a Replica> {
        entry
            .replicas
            .iter()
            .filter(|r| !self.sim().is_dead(r.committed.device))
            .collect()
    }

    fn lock_region(&self, entry: &DirectEntry) -> Result<Region, StoreError> {
        self.live(entry)
            .first()
            .map(|r| r.committed)
            .ok_or(StoreError::Fabric(FabricError::DeviceUnavailable(
                entry.replicas[0].committed.device,
            )))
    }

    async fn lock(&self, at: Region) -> Result<(), StoreError> {
        loop {
            if self.port.cas(at.device, at.address, 0, 1).await? == 0 {
                let h = self.shared.holders.get() + 1;
                self.shared.holders.set(h);
                self.shared.max_holders.set(self.shared.max_holders.get().max(h));
                return Ok(());
            }
            self.sim().count("direct.lock_retries", 1);
            self.sim().yield_spin().await;
        }
    }

    async fn unlock(&self, at: Region) -> Result<(), StoreError> {
        self.shared.holders.set(self.shared.holders.get() - 1);
        self.port.write(at.device, at.address, vec![0; 8]).await?;
        Ok(())
    }

    async fn write_frames(
        &self,
        spaces: &[Region],
        frame: &[u8],
        commit: Option<CommitMark>,
    ) -> Result<(), StoreError> {
        let writes = spaces
            .iter()
            .map(|s| OpRequest::Write {
                device: s.device,
                address: s.address + Layout::FRAME_OFFSET,
                data: frame.to_vec(),
            })
            .collect();
        let r = match commit {
            Some(m) => self.port.batch_commit(writes, m).await,
            None => self.port.batch(writes).await,
        };
        all_ok(r).map(|_| ())
    }

    async fn validate(&self, spaces: &[Region], layout: &Layout) -> Result<(), StoreError> {
        let reads = spaces
            .iter()
            .map(|s| OpRequest::Read {
                device: s.device,
                address: s.address + layout.last_byte(),
                len: 1,
            })
            .collect();
        all_ok(self.port.batch(reads).await).map(|_| ())
    }

    async fn put_locked(&self, key: &[u8], entry: &DirectEntry, value: &[u8]) -> Result<(), StoreError> {
        let frame = entry.layout.encode(self.next_tag(), value);
        let live = self.live(entry);
        let redo: Vec<Region> = live.iter().map(|r| r.uncommitted).collect();
        let committed: Vec<Region> = live.iter().map(|r| r.committed).collect();
        self.write_frames(&redo, &frame, None).await?;
        self.validate(&redo, &entry.layout).await?;
        self.write_frames(&committed, &frame, Some(commit_mark(key, value)))
            .await?;
        self.validate(&committed, &entry.layout).await
    }

    async fn get_lock(&self, entry: &DirectEntry) -> Result<Vec<u8>, StoreError> {
        let at = self.lock_region(entry)?;
        self.lock(at).await?;
        let read = self
            .port
            .read(at.device, at.address + Layout::FRAME_OFFSET, entry.layout.frame_len())
            .await;
        self.unlock(at).await?;
        let frame = read?;
        entry
            .layout
            .decode(&frame)
            .ok_or_else(|| StoreError::Protocol("corrupt frame under lock".into()))
    }

    async fn get_crc(&self, entry: &DirectEntry) -> Result<Vec<u8>, StoreError> {
        loop {
            let at = self.lock_region(entry)?;
            let frame = self
                .port
                .read(at.device, at.address + Layout::FRAME_OFFSET, entry.layout.frame_len())
                .await?;
            if let Some(v) = entry.layout.decode(&frame) {
                return Ok(v);
            }
            self.sim().count("direct.crc_retries", 1);
            self.sim().yield_spin().await;
        }
    }
}

impl KvStore for DirectClient {
    fn kind(&self) -> StoreKind {
        match self.shared.config.variant {
            Variant::Lock => StoreKind::DirectLock,
            Variant::Crc => StoreKind::DirectCrc,
        }
    }

    async fn create(&self, key: &[u8], size: u64) -> Result<(), StoreError> {
        if self.shared.registry.contains(key) {
            return Err(StoreError::KeyExists);
        }
        let layout = Layout::new(self.shared.config.variant, size);
        let devices = self.sim().device_count();
        let n = self.shared.config.replication;
        let primary = self.shared.next_primary.get();
        self.shared.next_primary.set((primary + 1) % devices);
        let now = self.sim().now();
        let mut replicas = Vec::with_capacity(n);
        {
            let mut alloc = self.shared.alloc.borrow_mut();
            for i in 0..n {
                let d = (primary + i as u16) % devices;
                let committed = alloc.alloc(d, layout.space_size(), now)?;
                let uncommitted = alloc.alloc(d, layout.space_size(), now)?;
                replicas.push(Replica { committed, uncommitted });
            }
        }
        let entry = DirectEntry { size, layout, replicas };
        let mut initial = vec![0u8; 8];
        initial.extend(layout.encode(0, &vec![0; size as usize]));
        let spaces: Vec<Region> = entry
            .replicas
            .iter()
            .flat_map(|r| [r.committed, r.uncommitted])
            .collect();
        let writes = spaces
            .iter()
            .map(|s| OpRequest::Write {
                device: s.device,
                address: s.address,
                data: initial.clone(),
            })
            .collect();
        let res = async {
            all_ok(self.port.batch(writes).await)?;
            self.validate(&spaces, &layout).await
        }
        .await;
        let res = res.and_then(|_| self.shared.registry.create(key, Rc::new(entry.clone())));
        if res.is_err() {
            let now = self.sim().now();
            let mut alloc = self.shared.alloc.borrow_mut();
            for s in spaces {
                alloc.free(s, now);
            }
        }
        res
    }

    async fn put(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        let entry = self.entry(key)?;
        if value.len() as u64 > entry.size {
            return Err(StoreError::ValueTooLarge {
                len: value.len(),
                size: entry.size,
            });
        }
        let at = self.lock_region(&entry)?;
        self.lock(at).await?;
        let res = self.put_locked(key, &entry, value).await;
        let unlocked = self.unlock(at).await;
        res.and(unlocked)
    }

    async fn get(&self, key: &[u8]) -> Result<Vec<u8>, StoreError> {
        let entry = self.entry(key)?;
        match entry.layout.variant {
            Variant::Lock => self.get_lock(&entry).await,
            Variant::Crc => self.get_crc(&entry).await,
        }
    }

    async fn del(&self, key: &[u8]) -> Result<(), StoreError> {
        let entry = self.shared.registry.remove(key)?;
        let now = self.sim().now();
        let mut alloc = self.shared.alloc.borrow_mut();
        for r in &entry.replicas {
            alloc.free(r.committed, now);
            alloc.free(r.uncommitted, now);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::SimConfig;

    fn setup(variant: Variant, n: usize) -> (Sim, DirectStore) {
        let sim = Sim::new(SimConfig::with_devices(3));
        let mut cfg = DirectConfig::new(variant);
        cfg.replication = n;
        let store = DirectStore::new(&sim, cfg);
        (sim, store)
    }

    fn rtts_of<T: 'static>(sim: &Sim, f: impl std::future::Future<Output = T> + 'static) -> (T, u64) {
        let h = sim.spawn_with_result(f);
        sim.run().unwrap();
        let rtts = sim.task_rtts(h.task());
        (h.take().unwrap(), rtts)
    }

    #[test]
    fn initial_value_is_zero_filled() {
        for v in [Variant::Lock, Variant::Crc] {
            let (sim, store) = setup(v, 1);
            let c = store.client(0);
            let got = sim
                .block_on(async move {
                    c.create(b"k", 24).await.unwrap();
                    c.get(b"k").await.unwrap()
                })
                .unwrap();
            assert_eq!(got, vec![0; 24]);
        }
    }

    #[test]
    fn uncontended_round_trips() {
        for (v, r_rtt) in [(Variant::Lock, 3), (Variant::Crc, 1)] {
            for n in [1, 3] {
                let (sim, store) = setup(v, n);
                let c = store.client(0);
                let c2 = c.clone();
                sim.block_on(async move { c2.create(b"k", 64).await.unwrap() }).unwrap();
                let c2 = c.clone();
                let (r, w) = rtts_of(&sim, async move { c2.put(b"k", &[5; 64]).await });
                r.unwrap();
                assert_eq!(w, 6, "{v:?} N={n} put");
                let c2 = c.clone();
                let (got, r) = rtts_of(&sim, async move { c2.get(b"k").await });
                assert_eq!(got.unwrap(), vec![5; 64]);
                assert_eq!(r, r_rtt, "{v:?} get");
            }
        }
    }

    #[test]
    fn duplicate_create_and_missing_key() {
        let (sim, store) = setup(Variant::Crc, 1);
        let c = store.client(0);
        let (a, b, g) = sim
            .block_on(async move {
                let a = c.create(b"a", 8).await;
                let b = c.create(b"a", 8).await;
                let g = c.get(b"zz").await;
                (a, b, g)
            })
            .unwrap();
        assert_eq!(a, Ok(()));
        assert_eq!(b, Err(StoreError::KeyExists));
        assert_eq!(g, Err(StoreError::KeyNotFound));
    }

    #[test]
    fn space_overhead_is_two_spaces() {
        let (sim, store) = setup(Variant::Lock, 1);
        let c = store.client(0);
        sim.block_on(async move { c.create(b"k", 1000).await.unwrap() })
            .unwrap();
        let e = store.entry(b"k").unwrap();
        let total: u64 = (0..3).map(|d| store.allocated(d)).sum();
        assert_eq!(total, 2 * e.layout.space_size());
    }

    #[test]
    fn value_too_large() {
        let (sim, store) = setup(Variant::Lock, 1);
        let c = store.client(0);
        let r = sim
            .block_on(async move {
                c.create(b"k", 8).await.unwrap();
                c.put(b"k", &[1; 9]).await
            })
            .unwrap();
        assert!(matches!(r, Err(StoreError::ValueTooLarge { .. })));
    }

    #[test]
    fn recover_without_crash_changes_nothing() {
        let (sim, store) = setup(Variant::Lock, 1);
        let c = store.client(0);
        sim.block_on(async move {
            c.create(b"k", 16).await.unwrap();
            c.put(b"k", &[3; 16]).await.unwrap();
        })
        .unwrap();
        let before = sim.with_device(0, |d| d.peek(0, 4096).to_vec());
        let s2 = store.clone();
        sim.block_on(async move { s2.recover(0).await.unwrap() }).unwrap();
        assert_eq!(sim.with_device(0, |d| d.peek(0, 4096).to_vec()), before);
    }
}
