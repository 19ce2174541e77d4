//! Bounded key-value caches with FIFO or LRU replacement.

use std::collections::{HashMap, VecDeque};
use std::hash::Hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Fifo,
    Lru,
}

/// Entry order is kept in a queue of (key, stamp); stale queue entries are
/// skipped lazily, so every operation is amortised O(1).
#[derive(Clone, Debug)]
pub struct Cache<K, V> {
    policy: Policy,
    capacity: usize,
    map: HashMap<K, (V, u64)>,
    order: VecDeque<(K, u64)>,
    clock: u64,
    hits: u64,
    misses: u64,
}

impl<K: Clone + Eq + Hash, V: Clone> Cache<K, V> {
    pub fn new(policy: Policy, capacity: usize) -> Self {
        Cache {
            policy,
            capacity,
            map: HashMap::new(),
            order: VecDeque::new(),
            clock: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity;
        while self.map.len() > capacity {
            self.evict();
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.map.contains_key(key)
    }

    /// Looks up `key` without counting or refreshing it.
    pub fn peek(&self, key: &K) -> Option<&V> {
        self.map.get(key).map(|e| &e.0)
    }

    /// Looks up `key`, counting a hit or a miss.
    pub fn get(&mut self, key: &K) -> Option<V> {
        let hit = if self.policy == Policy::Lru && self.map.contains_key(key) {
            self.clock += 1;
            let stamp = self.clock;
            self.order.push_back((key.clone(), stamp));
            let e = self.map.get_mut(key).unwrap();
            e.1 = stamp;
            Some(e.0.clone())
        } else {
            self.map.get(key).map(|e| e.0.clone())
        };
        if hit.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        self.compact();
        hit
    }

    /// Inserts or replaces. A replaced entry keeps its FIFO position.
    pub fn insert(&mut self, key: K, value: V) {
        if self.capacity == 0 {
            return;
        }
        if let Some(e) = self.map.get_mut(&key) {
            e.0 = value;
            if self.policy == Policy::Lru {
                self.clock += 1;
                e.1 = self.clock;
                self.order.push_back((key, self.clock));
            }
            return;
        }
        if self.map.len() >= self.capacity {
            self.evict();
        }
        self.clock += 1;
        self.order.push_back((key.clone(), self.clock));
        self.map.insert(key, (value, self.clock));
        self.compact();
    }

    /// Replaces the value only if `key` is cached.
    pub fn update(&mut self, key: &K, value: V) {
        if let Some(e) = self.map.get_mut(key) {
            e.0 = value;
        }
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        self.map.remove(key).map(|e| e.0)
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.order.clear();
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    fn evict(&mut self) {
        while let Some((k, stamp)) = self.order.pop_front() {
            if self.map.get(&k).is_some_and(|e| e.1 == stamp) {
                self.map.remove(&k);
                return;
            }
        }
    }

    fn compact(&mut self) {
        if self.order.len() > 2 * self.map.len() + 16 {
            let map = &self.map;
            self.order.retain(|(k, s)| map.get(k).is_some_and(|e| e.1 == *s));
        }
    }
}
