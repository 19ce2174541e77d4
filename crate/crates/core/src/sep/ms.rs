//! Metadata server: key table, slot allocation and reclamation, load
//! tracking. It never touches device memory; everything here is
//! bookkeeping driven by client messages.

use std::collections::{HashMap, HashSet, VecDeque};

use super::header::{SlotRef, Version};
use crate::alloc::ChunkAllocator;
use crate::api::{Key, StoreError};
use crate::fabric::DeviceId;

#[derive(Clone, Copy, Debug)]
pub struct MsConfig {
    pub devices: u16,
    pub device_capacity: u64,
    pub chunk_size: u64,
    /// Bytes at the start of every device reserved for shortcut words.
    pub shortcut_bytes: u64,
    pub read_abort_t: u64,
    pub epoch_t: u64,
    pub load_balance: bool,
    pub record_transitions: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotState {
    Free,
    Allocated(u16),
    InChain,
    /// Retired by a client; waiting for the key's head to pass it.
    Retired,
    ToGc,
    Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transition {
    pub device: DeviceId,
    pub address: u64,
    pub from: SlotState,
    pub to: SlotState,
    /// Gc version after the transition.
    pub gc: u8,
    pub time: u64,
    /// When the retire message for this slot's current life arrived.
    pub receipt: Option<u64>,
}

#[derive(Clone, Debug)]
struct SlotInfo {
    gc: u8,
    class: u64,
    state: SlotState,
    receipt: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyRecord {
    /// Distinguishes successive creations of the same key.
    pub incarnation: u64,
    pub size: u64,
    pub replication: usize,
    pub head: Version,
    pub shortcut: (DeviceId, u64),
}

/// A superseded version and the version that replaced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Retire {
    pub key: Key,
    pub incarnation: u64,
    pub version: Version,
    pub successor: Version,
}

pub struct MetaServer {
    config: MsConfig,
    keys: HashMap<Key, KeyRecord>,
    backup: HashMap<Key, KeyRecord>,
    /// Retired versions not yet passed by their key's head, by primary slot.
    pending: HashMap<(DeviceId, u64), Retire>,
    slots: HashMap<(DeviceId, u64), SlotInfo>,
    chunks: ChunkAllocator,
    free: HashMap<(DeviceId, u64), Vec<u64>>,
    to_gc: VecDeque<((DeviceId, u64), u64)>,
    epoch: VecDeque<((DeviceId, u64), u64)>,
    shortcut_next: Vec<u64>,
    shortcut_free: Vec<VecDeque<(u64, u64)>>,
    load: HashMap<u16, Vec<u64>>,
    dead: HashSet<DeviceId>,
    transitions: Vec<Transition>,
    detours: u64,
    incarnations: u64,
    rr: usize,
    last_broadcast: u64,
    now: u64,
}

impl MetaServer {
    pub fn new(config: MsConfig) -> Self {
        assert!(config.devices <= 64, "links address at most 64 devices");
        let base = config.shortcut_bytes.div_ceil(config.chunk_size).max(1) * config.chunk_size;
        MetaServer {
            config,
            keys: HashMap::new(),
            backup: HashMap::new(),
            pending: HashMap::new(),
            slots: HashMap::new(),
            chunks: ChunkAllocator::new(config.devices, base, config.device_capacity, config.chunk_size),
            free: HashMap::new(),
            to_gc: VecDeque::new(),
            epoch: VecDeque::new(),
            shortcut_next: vec![0; config.devices as usize],
            shortcut_free: vec![VecDeque::new(); config.devices as usize],
            load: HashMap::new(),
            dead: HashSet::new(),
            transitions: Vec::new(),
            detours: 0,
            incarnations: 0,
            rr: 0,
            last_broadcast: 0,
            now: 0,
        }
    }

    pub fn config(&self) -> &MsConfig {
        &self.config
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn lookup(&self, key: &[u8]) -> Option<KeyRecord> {
        self.keys.get(key).cloned()
    }

    pub fn backup_lookup(&self, key: &[u8]) -> Option<KeyRecord> {
        self.backup.get(key).cloned()
    }

    /// Replaces the key table with the backup's copy.
    pub fn fail_over(&mut self) {
        self.keys = self.backup.clone();
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Slots that went through the epoch list so far.
    pub fn epoch_detours(&self) -> u64 {
        self.detours
    }

    pub fn slot_state(&self, device: DeviceId, address: u64) -> Option<(SlotState, u8)> {
        self.slots.get(&(device, address)).map(|s| (s.state, s.gc))
    }

    /// Slots ever carved out of device space.
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn count_in(&self, state: SlotState) -> usize {
        self.slots.values().filter(|s| s.state == state).count()
    }

    pub fn mark_dead(&mut self, device: DeviceId) {
        self.dead.insert(device);
    }

    // ---- load ----

    pub fn report_load(&mut self, cn: u16, per_device: Vec<u64>) {
        self.load.insert(cn, per_device);
    }

    pub fn load(&self, device: DeviceId) -> u64 {
        self.load
            .values()
            .map(|v| v.get(device as usize).copied().unwrap_or(0))
            .sum()
    }

    /// A device is hot when its load exceeds 1.5x the mean.
    pub fn is_hot(&self, device: DeviceId) -> bool {
        let n = self.config.devices as u64;
        let total: u64 = (0..self.config.devices).map(|d| self.load(d)).sum();
        total > 0 && self.load(device) * 2 * n > 3 * total
    }

    fn live(&self) -> Vec<DeviceId> {
        (0..self.config.devices).filter(|d| !self.dead.contains(d)).collect()
    }

    /// Devices in allocation preference order. Hot devices are left out
    /// when at least `spread` others remain.
    fn preference(&mut self, spread: usize) -> Vec<DeviceId> {
        let mut devs = self.live();
        if devs.is_empty() {
            return devs;
        }
        let start = self.rr % devs.len();
        self.rr += 1;
        devs.rotate_left(start);
        if self.config.load_balance {
            let cool: Vec<DeviceId> = devs.iter().copied().filter(|d| !self.is_hot(*d)).collect();
            if cool.len() >= spread.max(1) {
                devs = cool;
            }
            devs.sort_by_key(|d| self.load(*d));
        }
        devs
    }

    // ---- slots ----

    fn set_state(&mut self, slot: (DeviceId, u64), to: SlotState) {
        let now = self.now;
        let info = self.slots.get_mut(&slot).expect("known slot");
        let from = info.state;
        info.state = to;
        match to {
            SlotState::Retired => info.receipt = Some(now),
            SlotState::Free | SlotState::Allocated(_) | SlotState::InChain => {
                if matches!(from, SlotState::Free | SlotState::Allocated(_)) {
                    info.receipt = None;
                }
            }
            _ => {}
        }
        if self.config.record_transitions {
            let info = &self.slots[&slot];
            self.transitions.push(Transition {
                device: slot.0,
                address: slot.1,
                from,
                to,
                gc: info.gc,
                time: now,
                receipt: info.receipt,
            });
        }
    }

    fn take_on(&mut self, cn: u16, device: DeviceId, class: u64) -> Option<SlotRef> {
        let address = match self.free.get_mut(&(device, class)).and_then(Vec::pop) {
            Some(a) => a,
            None => {
                let r = self.chunks.alloc(device, class).ok()?;
                self.slots.insert(
                    (device, r.address),
                    SlotInfo {
                        gc: 0,
                        class,
                        state: SlotState::Free,
                        receipt: None,
                    },
                );
                r.address
            }
        };
        self.set_state((device, address), SlotState::Allocated(cn));
        Some(SlotRef {
            device,
            address,
            gc: self.slots[&(device, address)].gc,
        })
    }

    /// Hands `count` free slots of `class` to a client, round-robin over
    /// at least `spread` preferred devices.
    pub fn alloc(
        &mut self,
        cn: u16,
        class: u64,
        count: usize,
        spread: usize,
        now: u64,
    ) -> Result<Vec<SlotRef>, StoreError> {
        self.tick(now);
        let devs = self.preference(spread);
        let mut out = Vec::with_capacity(count);
        let mut i = 0;
        let mut misses = 0;
        while out.len() < count {
            if devs.is_empty() || misses == devs.len() {
                for s in out {
                    self.release(s);
                }
                return Err(StoreError::OutOfSpace);
            }
            match self.take_on(cn, devs[i % devs.len()], class) {
                Some(s) => {
                    out.push(s);
                    misses = 0;
                }
                None => misses += 1,
            }
            i += 1;
        }
        Ok(out)
    }

    /// Returns an allocated, never-published slot to the free list.
    pub fn release(&mut self, slot: SlotRef) {
        let key = slot.slot();
        if let Some(info) = self.slots.get(&key) {
            if matches!(info.state, SlotState::Allocated(_)) {
                let class = info.class;
                self.set_state(key, SlotState::Free);
                self.free.entry((key.0, class)).or_default().push(key.1);
            }
        }
    }

    fn alloc_shortcut(&mut self, device: DeviceId) -> Option<(DeviceId, u64)> {
        let now = self.now;
        let q = &mut self.shortcut_free[device as usize];
        if q.front().is_some_and(|(_, ready)| *ready <= now) {
            return q.pop_front().map(|(a, _)| (device, a));
        }
        let next = &mut self.shortcut_next[device as usize];
        if *next + 8 > self.config.shortcut_bytes {
            return None;
        }
        let a = *next;
        *next += 8;
        Some((device, a))
    }

    // ---- keys ----

    /// Allocates the first version of a key and its shortcut word. The key
    /// becomes visible only at [`MetaServer::register`].
    pub fn reserve(
        &mut self,
        cn: u16,
        key: &[u8],
        class: u64,
        replication: usize,
        now: u64,
    ) -> Result<(Version, (DeviceId, u64)), StoreError> {
        self.tick(now);
        if self.keys.contains_key(key) {
            return Err(StoreError::KeyExists);
        }
        let live = self.live();
        if live.len() < replication {
            return Err(StoreError::OutOfSpace);
        }
        let devs: Vec<DeviceId> = if self.config.load_balance {
            let mut d = self.preference(replication);
            for extra in live {
                if !d.contains(&extra) {
                    d.push(extra);
                }
            }
            d
        } else {
            live
        };
        let mut copies = Vec::with_capacity(replication);
        for &d in &devs {
            if copies.len() == replication {
                break;
            }
            if let Some(s) = self.take_on(cn, d, class) {
                copies.push(s);
            }
        }
        let shortcut = match copies.first() {
            Some(p) if copies.len() == replication => self.alloc_shortcut(p.device),
            _ => None,
        };
        match shortcut {
            Some(sc) => Ok((Version { copies }, sc)),
            None => {
                for s in copies {
                    self.release(s);
                }
                Err(StoreError::OutOfSpace)
            }
        }
    }

    /// Publishes a reserved and initialised key.
    pub fn register(
        &mut self,
        key: &[u8],
        size: u64,
        replication: usize,
        head: Version,
        shortcut: (DeviceId, u64),
        now: u64,
    ) -> Result<KeyRecord, StoreError> {
        self.now = now.max(self.now);
        if self.keys.contains_key(key) {
            for s in &head.copies {
                self.release(*s);
            }
            self.free_shortcut(shortcut);
            return Err(StoreError::KeyExists);
        }
        for s in &head.copies {
            self.set_state(s.slot(), SlotState::InChain);
        }
        self.incarnations += 1;
        let rec = KeyRecord {
            incarnation: self.incarnations,
            size,
            replication,
            head,
            shortcut,
        };
        self.keys.insert(key.to_vec(), rec.clone());
        self.backup.insert(key.to_vec(), rec.clone());
        Ok(rec)
    }

    pub fn free_shortcut(&mut self, (device, address): (DeviceId, u64)) {
        let ready = self.now + self.config.read_abort_t;
        self.shortcut_free[device as usize].push_back((address, ready));
    }

    fn owned(&self, v: &Version) -> bool {
        v.copies.iter().all(|s| {
            self.slots
                .get(&s.slot())
                .is_some_and(|i| i.gc == s.gc && matches!(i.state, SlotState::Allocated(_) | SlotState::InChain))
        })
    }

    fn queue_gc(&mut self, v: &Version) {
        for s in &v.copies {
            if self.slots.get(&s.slot()).is_some_and(|i| i.state != SlotState::Retired) {
                self.set_state(s.slot(), SlotState::Retired);
            }
            self.set_state(s.slot(), SlotState::ToGc);
            self.to_gc.push_back((s.slot(), self.now));
        }
    }

    /// Accepts a batch of retirements. Returns how many were rejected
    /// because a slot was not live in the stated gc version.
    pub fn retire(&mut self, batch: Vec<Retire>, now: u64) -> usize {
        self.tick(now);
        let mut rejected = 0;
        let mut touched = Vec::new();
        for r in batch {
            if !self.owned(&r.version) {
                rejected += 1;
                continue;
            }
            for s in &r.successor.copies {
                if self
                    .slots
                    .get(&s.slot())
                    .is_some_and(|i| i.gc == s.gc && matches!(i.state, SlotState::Allocated(_)))
                {
                    self.set_state(s.slot(), SlotState::InChain);
                }
            }
            if self.keys.get(&r.key).is_some_and(|k| k.incarnation == r.incarnation) {
                for s in &r.version.copies {
                    self.set_state(s.slot(), SlotState::Retired);
                }
                touched.push(r.key.clone());
                self.pending.insert(r.version.primary().slot(), r);
            } else {
                self.queue_gc(&r.version);
            }
        }
        for key in touched {
            self.advance(&key);
        }
        rejected
    }

    /// Moves the key's head past retired versions.
    fn advance(&mut self, key: &[u8]) {
        let mut moved = false;
        loop {
            let head = self.keys[key].head.clone();
            match self.pending.get(&head.primary().slot()) {
                Some(r) if r.version == head && r.key == key => {
                    let r = self.pending.remove(&head.primary().slot()).unwrap();
                    self.queue_gc(&r.version);
                    self.keys.get_mut(key).unwrap().head = r.successor;
                    moved = true;
                }
                _ => break,
            }
        }
        if moved {
            self.backup.insert(key.to_vec(), self.keys[key].clone());
        }
    }

    /// Removes a key whose tail has been tombstoned; every version known
    /// here is queued for reclamation.
    pub fn delete(&mut self, key: &[u8], incarnation: u64, tail: &Version, now: u64) -> Result<(), StoreError> {
        self.tick(now);
        if self.keys.get(key).is_none_or(|r| r.incarnation != incarnation) {
            return Err(StoreError::KeyNotFound);
        }
        let rec = self.keys.remove(key).unwrap();
        self.backup.remove(key);
        let mut versions = vec![rec.head.clone()];
        let of_key: Vec<(DeviceId, u64)> = self
            .pending
            .iter()
            .filter(|(_, r)| r.key == key)
            .map(|(k, _)| *k)
            .collect();
        for k in of_key {
            versions.push(self.pending.remove(&k).unwrap().version);
        }
        if !versions.contains(tail) {
            versions.push(tail.clone());
        }
        for v in versions {
            if v.copies.iter().all(|s| {
                self.slots.get(&s.slot()).is_some_and(|i| {
                    i.gc == s.gc && !matches!(i.state, SlotState::ToGc | SlotState::Epoch | SlotState::Free)
                })
            }) {
                self.queue_gc(&v);
            }
        }
        self.free_shortcut(rec.shortcut);
        Ok(())
    }

    // ---- reclamation ----

    /// Advances reclamation to `now`.
    pub fn tick(&mut self, now: u64) {
        self.now = now.max(self.now);
        let (rat, et) = (self.config.read_abort_t, self.config.epoch_t);
        while let Some(&(slot, since)) = self.to_gc.front() {
            if since + rat > self.now {
                break;
            }
            self.to_gc.pop_front();
            let info = self.slots.get_mut(&slot).unwrap();
            info.gc = info.gc.wrapping_add(1);
            if info.gc == 0 {
                self.detours += 1;
                self.set_state(slot, SlotState::Epoch);
                self.epoch.push_back((slot, self.now));
            } else {
                self.admit(slot);
            }
        }
        while let Some(&(slot, since)) = self.epoch.front() {
            if since + et > self.now {
                break;
            }
            self.epoch.pop_front();
            self.admit(slot);
        }
    }

    fn admit(&mut self, slot: (DeviceId, u64)) {
        let class = self.slots[&slot].class;
        self.set_state(slot, SlotState::Free);
        self.free.entry((slot.0, class)).or_default().push(slot.1);
    }

    /// True once per epoch: time to tell clients to drop idle cursors.
    pub fn broadcast_due(&mut self, now: u64) -> bool {
        if now >= self.last_broadcast + self.config.epoch_t {
            self.last_broadcast = now;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(lb: bool) -> MetaServer {
        MetaServer::new(MsConfig {
            devices: 4,
            device_capacity: 1 << 20,
            chunk_size: 4096,
            shortcut_bytes: 4096,
            read_abort_t: 64,
            epoch_t: 4096,
            load_balance: lb,
            record_transitions: true,
        })
    }

    fn v(s: SlotRef) -> Version {
        Version { copies: vec![s] }
    }

    #[test]
    fn fresh_alloc_is_distinct_gc_zero() {
        let mut m = ms(false);
        let s = m.alloc(0, 128, 16, 1, 0).unwrap();
        let set: HashSet<_> = s.iter().map(|x| x.slot()).collect();
        assert_eq!(set.len(), 16);
        assert!(s.iter().all(|x| x.gc == 0 && x.address >= 4096));
    }

    #[test]
    fn alloc_beyond_capacity_fails() {
        let mut m = ms(false);
        assert_eq!(m.alloc(0, 4096, 2000, 1, 0), Err(StoreError::OutOfSpace));
    }

    #[test]
    fn hot_device_is_avoided() {
        let mut m = ms(true);
        m.report_load(0, vec![1000, 10, 10, 10]);
        assert!(m.is_hot(0));
        let s = m.alloc(0, 64, 64, 1, 0).unwrap();
        assert_eq!(s.iter().filter(|x| x.device == 0).count(), 0);
    }

    fn keyed(m: &mut MetaServer) -> (Version, Version) {
        let (head, sc) = m.reserve(0, b"k", 64, 1, 0).unwrap();
        m.register(b"k", 8, 1, head.clone(), sc, 0).unwrap();
        let next = v(m.alloc(0, 64, 1, 1, 0).unwrap()[0]);
        (head, next)
    }

    #[test]
    fn retire_waits_read_abort_t() {
        let mut m = ms(false);
        let (head, next) = keyed(&mut m);
        let slot = head.primary();
        m.retire(
            vec![Retire {
                key: b"k".to_vec(),
                incarnation: 1,
                version: head.clone(),
                successor: next.clone(),
            }],
            10,
        );
        assert_eq!(m.lookup(b"k").unwrap().head, next);
        m.tick(73);
        assert_eq!(m.slot_state(slot.device, slot.address), Some((SlotState::ToGc, 0)));
        m.tick(74);
        assert_eq!(m.slot_state(slot.device, slot.address), Some((SlotState::Free, 1)));
    }

    #[test]
    fn duplicate_retire_rejected_and_empty_batch_noop() {
        let mut m = ms(false);
        let (head, next) = keyed(&mut m);
        let r = Retire {
            key: b"k".to_vec(),
            incarnation: 1,
            version: head,
            successor: next,
        };
        assert_eq!(m.retire(vec![], 1), 0);
        assert_eq!(m.retire(vec![r.clone()], 1), 0);
        assert_eq!(m.retire(vec![r], 2), 1);
    }

    #[test]
    fn head_waits_for_out_of_order_retires() {
        let mut m = ms(false);
        let (v1, v2) = keyed(&mut m);
        let v3 = v(m.alloc(0, 64, 1, 1, 0).unwrap()[0]);
        let k = b"k".to_vec();
        m.retire(
            vec![Retire {
                key: k.clone(),
                incarnation: 1,
                version: v2.clone(),
                successor: v3.clone(),
            }],
            1,
        );
        assert_eq!(m.lookup(b"k").unwrap().head, v1);
        assert_eq!(m.count_in(SlotState::ToGc), 0);
        m.retire(
            vec![Retire {
                key: k,
                incarnation: 1,
                version: v1,
                successor: v2,
            }],
            2,
        );
        assert_eq!(m.lookup(b"k").unwrap().head, v3);
        assert_eq!(m.count_in(SlotState::ToGc), 2);
        assert_eq!(m.backup_lookup(b"k"), m.lookup(b"k"));
    }

    #[test]
    fn gc_wrap_goes_through_epoch_list() {
        let mut m = ms(false);
        let (head, _) = keyed(&mut m);
        let slot = head.primary().slot();
        m.slots.get_mut(&slot).unwrap().gc = 255;
        let mut h = head.clone();
        h.copies[0].gc = 255;
        m.delete(b"k", 1, &h, 0).unwrap();
        m.tick(64);
        assert_eq!(m.slot_state(slot.0, slot.1), Some((SlotState::Epoch, 0)));
        m.tick(64 + 4095);
        assert_eq!(m.slot_state(slot.0, slot.1), Some((SlotState::Epoch, 0)));
        m.tick(64 + 4096);
        assert_eq!(m.slot_state(slot.0, slot.1), Some((SlotState::Free, 0)));
    }

    #[test]
    fn gc_twelve_goes_to_free_with_thirteen() {
        let mut m = ms(false);
        let (head, _) = keyed(&mut m);
        let slot = head.primary().slot();
        m.slots.get_mut(&slot).unwrap().gc = 12;
        let mut h = head.clone();
        h.copies[0].gc = 12;
        m.delete(b"k", 1, &h, 0).unwrap();
        m.tick(100);
        assert_eq!(m.slot_state(slot.0, slot.1), Some((SlotState::Free, 13)));
    }

    #[test]
    fn register_race_returns_key_exists() {
        let mut m = ms(false);
        let a = m.reserve(0, b"k", 64, 1, 0).unwrap();
        let b = m.reserve(1, b"k", 64, 1, 0).unwrap();
        m.register(b"k", 8, 1, a.0, a.1, 0).unwrap();
        assert_eq!(m.register(b"k", 8, 1, b.0.clone(), b.1, 0), Err(StoreError::KeyExists));
        let s = b.0.primary();
        assert_eq!(m.slot_state(s.device, s.address), Some((SlotState::Free, 0)));
    }

    #[test]
    fn retired_slot_not_reallocated_before_read_abort_t() {
        let mut m = ms(false);
        let (head, next) = keyed(&mut m);
        m.retire(
            vec![Retire {
                key: b"k".to_vec(),
                incarnation: 1,
                version: head.clone(),
                successor: next,
            }],
            5,
        );
        let got = m.alloc(0, 64, 4, 1, 6).unwrap();
        assert!(got.iter().all(|s| s.slot() != head.primary().slot()));
        let later = m.alloc(0, 64, 8, 1, 5 + 64).unwrap();
        let reused = later.iter().find(|s| s.slot() == head.primary().slot()).unwrap();
        assert_eq!(reused.gc, 1);
    }

    /// Checks every recorded transition: legal predecessor state and the
    /// reclamation delays.
    fn check_transitions(m: &MetaServer) {
        let mut last: HashMap<(DeviceId, u64), SlotState> = HashMap::new();
        for t in m.transitions() {
            let prev = last.insert((t.device, t.address), t.to).unwrap_or(SlotState::Free);
            assert_eq!(prev, t.from, "{t:?}");
            let legal = matches!(
                (t.from, t.to),
                (SlotState::Free, SlotState::Allocated(_))
                    | (SlotState::Allocated(_), SlotState::Free)
                    | (SlotState::Allocated(_), SlotState::InChain)
                    | (SlotState::InChain | SlotState::Allocated(_), SlotState::Retired)
                    | (SlotState::Retired, SlotState::ToGc)
                    | (SlotState::ToGc, SlotState::Free | SlotState::Epoch)
                    | (SlotState::Epoch, SlotState::Free)
            );
            assert!(legal, "{t:?}");
            let receipt = t.receipt.unwrap_or(0);
            match (t.from, t.to) {
                (SlotState::ToGc, SlotState::Free) => assert!(t.time >= receipt + 64, "{t:?}"),
                (SlotState::Epoch, SlotState::Free) => assert!(t.time >= receipt + 64 + 4096, "{t:?}"),
                (SlotState::ToGc, SlotState::Epoch) => assert_eq!(t.gc, 0),
                _ => {}
            }
        }
    }

    #[test]
    fn one_epoch_detour_per_256_reuses() {
        let mut m = ms(false);
        let (mut cur, _) = keyed(&mut m);
        let mut now = 0;
        for _ in 0..1500 {
            now += 5000;
            let next = v(m.alloc(0, 64, 1, 1, now).unwrap()[0]);
            m.retire(
                vec![Retire {
                    key: b"k".to_vec(),
                    incarnation: 1,
                    version: cur,
                    successor: next.clone(),
                }],
                now,
            );
            cur = next;
        }
        m.tick(now + 10_000);
        check_transitions(&m);
        let mut reclaims: HashMap<(DeviceId, u64), (u32, u32)> = HashMap::new();
        for t in m.transitions() {
            if t.from == SlotState::ToGc {
                let e = reclaims.entry((t.device, t.address)).or_default();
                e.0 += 1;
                e.1 += (t.to == SlotState::Epoch) as u32;
            }
        }
        assert!(reclaims.values().any(|(n, _)| *n >= 256));
        for (n, detours) in reclaims.values() {
            assert_eq!(*detours, n / 256);
        }
    }

    use proptest::prelude::*;

    #[derive(Clone, Debug)]
    enum Op {
        Put(u8),
        Flush,
        Wait(u64),
        Delete(u8),
        Create(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0u8..3).prop_map(Op::Put),
            2 => Just(Op::Flush),
            2 => (1u64..5000).prop_map(Op::Wait),
            1 => (0u8..3).prop_map(Op::Delete),
            1 => (0u8..3).prop_map(Op::Create),
        ]
    }

    proptest! {
        #[test]
        fn slot_lifecycle_invariants(ops in proptest::collection::vec(op(), 1..300)) {
            let mut m = ms(false);
            let mut now = 0;
            let mut tails: HashMap<u8, (Version, u64)> = HashMap::new();
            let mut queued: Vec<Retire> = Vec::new();
            for o in ops {
                now += 1;
                match o {
                    Op::Create(k) => {
                        if let Ok((h, sc)) = m.reserve(0, &[k], 64, 1, now) {
                            let rec = m.register(&[k], 8, 1, h.clone(), sc, now).unwrap();
                            tails.insert(k, (h, rec.incarnation));
                        }
                    }
                    Op::Put(k) => {
                        if let Some((t, inc)) = tails.get(&k).cloned() {
                            let n = v(m.alloc(0, 64, 1, 1, now).unwrap()[0]);
                            queued.push(Retire { key: vec![k], incarnation: inc, version: t, successor: n.clone() });
                            tails.insert(k, (n, inc));
                        }
                    }
                    Op::Flush => {
                        m.retire(std::mem::take(&mut queued), now);
                    }
                    Op::Wait(d) => {
                        now += d;
                        m.tick(now);
                    }
                    Op::Delete(k) => {
                        if let Some((t, inc)) = tails.remove(&k) {
                            m.delete(&[k], inc, &t, now).unwrap();
                        }
                    }
                }
                // Live tails are never handed out again.
                for (t, _) in tails.values() {
                    let (state, gc) = m.slot_state(t.primary().device, t.primary().address).unwrap();
                    prop_assert_eq!(gc, t.primary().gc);
                    prop_assert!(matches!(state, SlotState::Allocated(_) | SlotState::InChain), "{:?}", state);
                }
            }
            m.retire(queued, now);
            m.tick(now + 100_000);
            check_transitions(&m);
            // Nothing leaks: only the live tails are still held.
            let held = m.slots.values().filter(|s| s.state != SlotState::Free).count();
            prop_assert_eq!(held, tails.len());
        }
    }
}
