//! DPM space managers. Allocation is pure bookkeeping: nothing here touches
//! device contents.

use std::collections::{HashMap, VecDeque};

use crate::api::StoreError;
use crate::fabric::DeviceId;

pub const SLOT_ALIGN: u64 = 64;

/// Size classes are multiples of 64 bytes, so slot addresses shifted right
/// by 6 give compact slot indices.
pub fn size_class(bytes: u64) -> u64 {
    bytes.div_ceil(SLOT_ALIGN).max(1) * SLOT_ALIGN
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region {
    pub device: DeviceId,
    pub address: u64,
    pub size: u64,
}

#[derive(Clone, Debug)]
struct Space {
    next: u64,
    end: u64,
}

/// Per-device chunks of uniform slot size, carved on demand from a bump
/// pointer, with per-(device, class) free lists.
#[derive(Clone, Debug)]
pub struct ChunkAllocator {
    chunk_size: u64,
    spaces: Vec<Space>,
    open: HashMap<(DeviceId, u64), Space>,
    free: HashMap<(DeviceId, u64), Vec<u64>>,
    in_use: Vec<u64>,
}

impl ChunkAllocator {
    /// Devices are managed from `base` up to `capacity`.
    pub fn new(devices: u16, base: u64, capacity: u64, chunk_size: u64) -> Self {
        assert!(base.is_multiple_of(SLOT_ALIGN) && chunk_size.is_multiple_of(SLOT_ALIGN));
        ChunkAllocator {
            chunk_size,
            spaces: (0..devices)
                .map(|_| Space {
                    next: base,
                    end: capacity,
                })
                .collect(),
            open: HashMap::new(),
            free: HashMap::new(),
            in_use: vec![0; devices as usize],
        }
    }

    pub fn devices(&self) -> u16 {
        self.spaces.len() as u16
    }

    pub fn alloc(&mut self, device: DeviceId, class: u64) -> Result<Region, StoreError> {
        debug_assert_eq!(class % SLOT_ALIGN, 0);
        let key = (device, class);
        let address = if let Some(a) = self.free.get_mut(&key).and_then(Vec::pop) {
            a
        } else {
            let need_chunk = self.open.get(&key).is_none_or(|c| c.next + class > c.end);
            if need_chunk {
                let space = &mut self.spaces[device as usize];
                let bytes = self.chunk_size.max(class);
                if space.next + bytes > space.end {
                    return Err(StoreError::OutOfSpace);
                }
                let start = space.next;
                space.next += bytes;
                self.open.insert(
                    key,
                    Space {
                        next: start,
                        end: start + bytes,
                    },
                );
            }
            let chunk = self.open.get_mut(&key).unwrap();
            let a = chunk.next;
            chunk.next += class;
            a
        };
        self.in_use[device as usize] += class;
        Ok(Region {
            device,
            address,
            size: class,
        })
    }

    pub fn free(&mut self, region: Region) {
        self.in_use[region.device as usize] -= region.size;
        self.free
            .entry((region.device, region.size))
            .or_default()
            .push(region.address);
    }

    /// Slots of `class` still obtainable on `device` without reuse.
    pub fn has_room(&self, device: DeviceId, class: u64) -> bool {
        let key = (device, class);
        self.free.get(&key).is_some_and(|f| !f.is_empty())
            || self.open.get(&key).is_some_and(|c| c.next + class <= c.end)
            || {
                let s = &self.spaces[device as usize];
                s.next + self.chunk_size.max(class) <= s.end
            }
    }

    pub fn in_use(&self, device: DeviceId) -> u64 {
        self.in_use[device as usize]
    }
}

/// Exact-size, 8-byte-aligned allocator. Freed regions are held back for a
/// quarantine period before reuse.
#[derive(Clone, Debug)]
pub struct BumpAllocator {
    spaces: Vec<Space>,
    free: HashMap<(DeviceId, u64), VecDeque<(u64, u64)>>,
    quarantine: u64,
    in_use: Vec<u64>,
}

impl BumpAllocator {
    pub fn new(devices: u16, base: u64, end: u64, quarantine: u64) -> Self {
        BumpAllocator {
            spaces: (0..devices).map(|_| Space { next: base, end }).collect(),
            free: HashMap::new(),
            quarantine,
            in_use: vec![0; devices as usize],
        }
    }

    pub fn alloc(&mut self, device: DeviceId, size: u64, now: u64) -> Result<Region, StoreError> {
        let size = size.div_ceil(8) * 8;
        let reuse = self.free.get_mut(&(device, size)).and_then(|q| match q.front() {
            Some((_, ready)) if *ready <= now => q.pop_front().map(|(a, _)| a),
            _ => None,
        });
        let address = match reuse {
            Some(a) => a,
            None => {
                let s = &mut self.spaces[device as usize];
                if s.next + size > s.end {
                    return Err(StoreError::OutOfSpace);
                }
                let a = s.next;
                s.next += size;
                a
            }
        };
        self.in_use[device as usize] += size;
        Ok(Region { device, address, size })
    }

    pub fn free(&mut self, region: Region, now: u64) {
        self.in_use[region.device as usize] -= region.size;
        self.free
            .entry((region.device, region.size))
            .or_default()
            .push_back((region.address, now + self.quarantine));
    }

    pub fn in_use(&self, device: DeviceId) -> u64 {
        self.in_use[device as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_round_to_64() {
        assert_eq!(size_class(1), 64);
        assert_eq!(size_class(64), 64);
        assert_eq!(size_class(1048), 1088);
    }

    #[test]
    fn sixteen_distinct_slots() {
        let mut a = ChunkAllocator::new(2, 4096, 1 << 20, 4096);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..16 {
            let r = a.alloc(1, 128).unwrap();
            assert_eq!(r.address % 64, 0);
            assert!(seen.insert(r.address));
        }
        assert_eq!(a.in_use(1), 16 * 128);
    }

    #[test]
    fn out_of_space_then_reuse() {
        let mut a = ChunkAllocator::new(1, 0, 1024, 512);
        let regions: Vec<_> = (0..4).map(|_| a.alloc(0, 256).unwrap()).collect();
        assert_eq!(a.alloc(0, 256), Err(StoreError::OutOfSpace));
        assert!(!a.has_room(0, 256));
        a.free(regions[2]);
        assert_eq!(a.alloc(0, 256).unwrap(), regions[2]);
    }

    #[test]
    fn bump_quarantine() {
        let mut b = BumpAllocator::new(1, 8, 64, 10);
        let r = b.alloc(0, 20, 0).unwrap();
        assert_eq!(r.size, 24);
        b.free(r, 5);
        let r2 = b.alloc(0, 24, 6).unwrap();
        assert_ne!(r2.address, r.address);
        b.free(r2, 6);
        assert_eq!(b.alloc(0, 24, 15).unwrap().address, r.address);
        assert_eq!(b.alloc(0, 24, 15), Err(StoreError::OutOfSpace));
    }
}
