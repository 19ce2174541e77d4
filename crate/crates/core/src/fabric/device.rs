//! A passive persistent-memory device image.
//!
//! The image keeps two views of memory: `applied`, which is what reads
//! observe, and the durable state, which is what survives a crash. The
//! durable state is stored sparsely as a shadow of the words that still have
//! unconfirmed sub-writes against them; every other word is durable as
//! applied.

use std::collections::{BTreeMap, VecDeque};

use rustc_hash::FxHashMap;

use super::{ConnId, DeviceId, FabricError};

/// Atomic grain of the fabric, matching the one-sided CAS width.
pub const WORD: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Health {
    Alive,
    Crashed,
    Dead,
}

/// Which unconfirmed sub-writes survive a crash.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Survivors {
    /// Only confirmed-durable state survives.
    #[default]
    DurableOnly,
    /// Every applied sub-write survives.
    All,
    /// Per connection, the first `n` unconfirmed sub-writes (issue order)
    /// survive. Connections not named lose all of theirs.
    Prefix(BTreeMap<ConnId, usize>),
}

#[derive(Clone, Debug)]
struct SubWrite {
    conn: ConnId,
    word: u64,
    offset: u8,
    len: u8,
    data: [u8; 8],
}

impl SubWrite {
    fn patch(&self, word_value: u64) -> u64 {
        let mut bytes = word_value.to_le_bytes();
        let (lo, hi) = (self.offset as usize, self.offset as usize + self.len as usize);
        bytes[lo..hi].copy_from_slice(&self.data[..self.len as usize]);
        u64::from_le_bytes(bytes)
    }
}

#[derive(Debug)]
pub struct DpmImage {
    id: DeviceId,
    applied: Vec<u8>,
    health: Health,
    /// word -> (durable value, sequence number of the write that produced it)
    shadow: FxHashMap<u64, (u64, u64)>,
    pending: FxHashMap<u64, SubWrite>,
    pending_by_conn: BTreeMap<ConnId, VecDeque<u64>>,
    pending_per_word: FxHashMap<u64, u32>,
    durable_counts: BTreeMap<ConnId, u64>,
}

impl DpmImage {
    pub fn new(id: DeviceId, capacity: u64) -> Self {
        DpmImage {
            id,
            applied: vec![0; capacity as usize],
            health: Health::Alive,
            shadow: FxHashMap::default(),
            pending: FxHashMap::default(),
            pending_by_conn: BTreeMap::new(),
            pending_per_word: FxHashMap::default(),
            durable_counts: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn capacity(&self) -> u64 {
        self.applied.len() as u64
    }

    pub fn health(&self) -> Health {
        self.health
    }

    /// Number of sub-writes of `conn` confirmed durable so far.
    pub fn durable_count(&self, conn: ConnId) -> u64 {
        self.durable_counts.get(&conn).copied().unwrap_or(0)
    }

    /// Unconfirmed sub-writes per connection, in connection order.
    pub fn pending_by_conn(&self) -> Vec<(ConnId, usize)> {
        self.pending_by_conn
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .map(|(c, q)| (*c, q.len()))
            .collect()
    }

    pub fn check_alive(&self) -> Result<(), FabricError> {
        match self.health {
            Health::Alive => Ok(()),
            _ => Err(FabricError::DeviceUnavailable(self.id)),
        }
    }

    pub fn check_range(&self, address: u64, length: u64) -> Result<(), FabricError> {
        match address.checked_add(length) {
            Some(end) if end <= self.capacity() => Ok(()),
            _ => Err(FabricError::OutOfRange {
                device: self.id,
                address,
                length,
            }),
        }
    }

    /// Splits `[address, address+len)` into word-bounded pieces, in
    /// increasing address order.
    pub fn split_words(address: u64, len: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut at = address;
        let end = address + len;
        while at < end {
            let word_end = (at / WORD + 1) * WORD;
            let piece_end = word_end.min(end);
            out.push((at, piece_end - at));
            at = piece_end;
        }
        out
    }

    /// Reads the applied bytes and confirms every earlier sub-write of
    /// `conn` on this device.
    pub fn read(&mut self, conn: ConnId, address: u64, len: u64) -> Result<Vec<u8>, FabricError> {
        self.check_alive()?;
        self.check_range(address, len)?;
        self.confirm(conn);
        Ok(self.applied[address as usize..(address + len) as usize].to_vec())
    }

    /// Reads applied bytes without any durability side effect (test and
    /// recovery inspection only).
    pub fn peek(&self, address: u64, len: u64) -> &[u8] {
        &self.applied[address as usize..(address + len) as usize]
    }

    /// Applies one sub-write that must lie within a single aligned word.
    pub fn write_sub(&mut self, conn: ConnId, seq: u64, address: u64, bytes: &[u8]) -> Result<(), FabricError> {
        self.check_alive()?;
        self.check_range(address, bytes.len() as u64)?;
        let word = address / WORD;
        debug_assert_eq!(
            (address + bytes.len() as u64 - 1) / WORD,
            word,
            "sub-write crosses a word"
        );
        let current = self.word(word);
        self.shadow.entry(word).or_insert((current, 0));
        let mut data = [0u8; 8];
        data[..bytes.len()].copy_from_slice(bytes);
        let sub = SubWrite {
            conn,
            word,
            offset: (address % WORD) as u8,
            len: bytes.len() as u8,
            data,
        };
        self.set_word(word, sub.patch(current));
        self.pending.insert(seq, sub);
        self.pending_by_conn.entry(conn).or_default().push_back(seq);
        *self.pending_per_word.entry(word).or_insert(0) += 1;
        Ok(())
    }

    /// Compare-and-swap on an aligned word. A successful swap is durable
    /// immediately; any CAS also confirms earlier sub-writes of `conn`.
    pub fn cas(&mut self, conn: ConnId, seq: u64, address: u64, expect: u64, new: u64) -> Result<u64, FabricError> {
        self.check_alive()?;
        self.check_range(address, WORD)?;
        if !address.is_multiple_of(WORD) {
            return Err(FabricError::Misaligned {
                device: self.id,
                address,
            });
        }
        self.confirm(conn);
        let word = address / WORD;
        let old = self.word(word);
        if old == expect {
            self.set_word(word, new);
            if let Some(entry) = self.shadow.get_mut(&word) {
                *entry = (new, seq);
            }
        }
        Ok(old)
    }

    fn confirm(&mut self, conn: ConnId) {
        let Some(queue) = self.pending_by_conn.get_mut(&conn) else {
            return;
        };
        let seqs: Vec<u64> = queue.drain(..).collect();
        *self.durable_counts.entry(conn).or_insert(0) += seqs.len() as u64;
        for seq in seqs {
            let sub = self.pending.remove(&seq).expect("pending sub-write");
            let (value, at) = self.shadow[&sub.word];
            if seq > at {
                self.shadow.insert(sub.word, (sub.patch(value), seq));
            }
            let count = self.pending_per_word.get_mut(&sub.word).expect("word count");
            *count -= 1;
            if *count == 0 {
                self.pending_per_word.remove(&sub.word);
                self.shadow.remove(&sub.word);
            }
        }
    }

    /// Truncates the image to its durable state plus the chosen surviving
    /// sub-writes. Returns the per-connection pending counts seen at the
    /// crash.
    pub fn crash(&mut self, permanent: bool, survivors: &Survivors) -> Vec<(ConnId, usize)> {
        let seen = self.pending_by_conn();
        let mut keep: BTreeMap<ConnId, usize> = BTreeMap::new();
        for (conn, n) in &seen {
            let k = match survivors {
                Survivors::DurableOnly => 0,
                Survivors::All => *n,
                Survivors::Prefix(map) => map.get(conn).copied().unwrap_or(0).min(*n),
            };
            keep.insert(*conn, k);
        }
        let mut used: BTreeMap<ConnId, usize> = BTreeMap::new();
        let mut pending: Vec<(u64, SubWrite)> = std::mem::take(&mut self.pending).into_iter().collect();
        pending.sort_by_key(|(seq, _)| *seq);
        for (seq, sub) in pending {
            let n = used.entry(sub.conn).or_insert(0);
            if *n < keep[&sub.conn] {
                *n += 1;
                let (value, at) = self.shadow[&sub.word];
                if seq > at {
                    self.shadow.insert(sub.word, (sub.patch(value), seq));
                }
            }
        }
        for (word, (value, _)) in std::mem::take(&mut self.shadow) {
            self.set_word(word, value);
        }
        self.pending_by_conn.clear();
        self.pending_per_word.clear();
        self.health = if permanent { Health::Dead } else { Health::Crashed };
        seen
    }

    pub fn recover(&mut self) -> Result<(), FabricError> {
        match self.health {
            Health::Dead => Err(FabricError::RecoverOnDead(self.id)),
            _ => {
                self.health = Health::Alive;
                Ok(())
            }
        }
    }

    fn word(&self, word: u64) -> u64 {
        let at = (word * WORD) as usize;
        let end = (at + 8).min(self.applied.len());
        let mut bytes = [0u8; 8];
        bytes[..end - at].copy_from_slice(&self.applied[at..end]);
        u64::from_le_bytes(bytes)
    }

    fn set_word(&mut self, word: u64, value: u64) {
        let at = (word * WORD) as usize;
        let end = (at + 8).min(self.applied.len());
        self.applied[at..end].copy_from_slice(&value.to_le_bytes()[..end - at]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: ConnId = ConnId(1);
    const B: ConnId = ConnId(2);

    fn write(dev: &mut DpmImage, conn: ConnId, seq: &mut u64, addr: u64, data: &[u8]) {
        let mut off = 0;
        for (at, len) in DpmImage::split_words(addr, data.len() as u64) {
            *seq += 1;
            dev.write_sub(conn, *seq, at, &data[off..off + len as usize]).unwrap();
            off += len as usize;
        }
    }

    #[test]
    fn fresh_image_reads_zero() {
        let mut dev = DpmImage::new(0, 64);
        assert_eq!(dev.read(A, 0, 8).unwrap(), vec![0u8; 8]);
    }

    #[test]
    fn split_respects_word_boundaries() {
        assert_eq!(DpmImage::split_words(0, 16), vec![(0, 8), (8, 8)]);
        assert_eq!(DpmImage::split_words(5, 12), vec![(5, 3), (8, 8), (16, 1)]);
        assert_eq!(DpmImage::split_words(8, 3), vec![(8, 3)]);
    }

    #[test]
    fn unconfirmed_write_lost_on_crash() {
        let mut dev = DpmImage::new(0, 64);
        let mut seq = 0;
        write(&mut dev, A, &mut seq, 0, &[7u8; 16]);
        dev.crash(false, &Survivors::DurableOnly);
        dev.recover().unwrap();
        assert_eq!(dev.peek(0, 16), &[0u8; 16]);
    }

    #[test]
    fn confirmed_write_survives_crash() {
        let mut dev = DpmImage::new(0, 64);
        let mut seq = 0;
        write(&mut dev, A, &mut seq, 0, &[7u8; 16]);
        dev.read(A, 15, 1).unwrap();
        assert_eq!(dev.durable_count(A), 2);
        dev.crash(false, &Survivors::DurableOnly);
        dev.recover().unwrap();
        assert_eq!(dev.peek(0, 16), &[7u8; 16]);
    }

    #[test]
    fn other_connection_read_does_not_confirm() {
        let mut dev = DpmImage::new(0, 64);
        let mut seq = 0;
        write(&mut dev, A, &mut seq, 0, &[7u8; 8]);
        dev.read(B, 0, 8).unwrap();
        dev.crash(false, &Survivors::DurableOnly);
        assert_eq!(dev.peek(0, 8), &[0u8; 8]);
    }

    #[test]
    fn prefix_survivors_keep_address_order_prefix() {
        let mut dev = DpmImage::new(0, 64);
        let mut seq = 0;
        write(&mut dev, A, &mut seq, 0, &[9u8; 24]);
        let mut keep = BTreeMap::new();
        keep.insert(A, 1);
        let seen = dev.crash(false, &Survivors::Prefix(keep));
        assert_eq!(seen, vec![(A, 3)]);
        assert_eq!(dev.peek(0, 8), &[9u8; 8]);
        assert_eq!(dev.peek(8, 16), &[0u8; 16]);
    }

    #[test]
    fn successful_cas_durable_over_pending_write() {
        let mut dev = DpmImage::new(0, 64);
        let mut seq = 0;
        write(&mut dev, A, &mut seq, 0, &5u64.to_le_bytes());
        seq += 1;
        assert_eq!(dev.cas(B, seq, 0, 5, 6).unwrap(), 5);
        // A's write is later confirmed; the CAS is newer and must win.
        dev.read(A, 0, 1).unwrap();
        dev.crash(false, &Survivors::DurableOnly);
        assert_eq!(dev.peek(0, 8), &6u64.to_le_bytes());
    }

    #[test]
    fn cas_swaps_only_on_match() {
        let mut dev = DpmImage::new(0, 64);
        assert_eq!(dev.cas(A, 1, 0, 0, 1).unwrap(), 0);
        assert_eq!(dev.cas(A, 2, 0, 0, 1).unwrap(), 1);
        assert_eq!(dev.peek(0, 8), &1u64.to_le_bytes());
        assert!(matches!(dev.cas(A, 3, 4, 0, 1), Err(FabricError::Misaligned { .. })));
    }

    #[test]
    fn dead_device_never_recovers() {
        let mut dev = DpmImage::new(3, 64);
        dev.crash(true, &Survivors::All);
        assert_eq!(dev.read(A, 0, 8), Err(FabricError::DeviceUnavailable(3)));
        assert_eq!(dev.recover(), Err(FabricError::RecoverOnDead(3)));
    }

    #[test]
    fn out_of_range_rejected() {
        let mut dev = DpmImage::new(0, 16);
        assert!(matches!(dev.read(A, 10, 8), Err(FabricError::OutOfRange { .. })));
    }
}
