//! Self-describing values for isolation and crash checking.
//!
//! Every 8-byte word carries `key hash (32) | generation (24) | word index (8)`,
//! so two generations differ in every word and a mixed read shows up in any
//! pair of words. An all-zero payload is the initial value, generation 0.

pub const GENERATION_BITS: u32 = 24;
pub const MAX_GENERATION: u32 = (1 << GENERATION_BITS) - 1;

/// FNV-1a, 32 bit.
pub fn key_hash(key: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in key {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

fn word(hash: u32, generation: u32, index: usize) -> u64 {
    ((hash as u64) << 32) | (((generation & MAX_GENERATION) as u64) << 8) | (index as u64 & 0xff)
}

/// Builds a stamped payload of `len` bytes (a trailing partial word is
/// truncated from the full stamp word).
pub fn stamp(key: &[u8], generation: u32, len: usize) -> Vec<u8> {
    assert!(
        generation > 0 && generation <= MAX_GENERATION,
        "generation out of range"
    );
    let hash = key_hash(key);
    let mut out = Vec::with_capacity(len.div_ceil(8) * 8);
    for i in 0..len.div_ceil(8) {
        out.extend_from_slice(&word(hash, generation, i).to_le_bytes());
    }
    out.truncate(len);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StampCheck {
    Consistent { key_hash: u32, generation: u32 },
    Torn { at: usize, expected: u64, found: u64 },
}

impl StampCheck {
    pub fn generation(&self) -> Option<u32> {
        match self {
            StampCheck::Consistent { generation, .. } => Some(*generation),
            StampCheck::Torn { .. } => None,
        }
    }
}

pub fn stamp_check(bytes: &[u8]) -> StampCheck {
    assert!(bytes.len().is_multiple_of(8), "stamped payloads are whole words");
    if bytes.iter().all(|b| *b == 0) {
        return StampCheck::Consistent {
            key_hash: 0,
            generation: 0,
        };
    }
    let words: Vec<u64> = bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let hash = (words[0] >> 32) as u32;
    let generation = ((words[0] >> 8) as u32) & MAX_GENERATION;
    for (i, w) in words.iter().enumerate() {
        let expected = word(hash, generation, i);
        if *w != expected {
            return StampCheck::Torn {
                at: i,
                expected,
                found: *w,
            };
        }
    }
    StampCheck::Consistent {
        key_hash: hash,
        generation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistent_roundtrip() {
        let v = stamp(b"k", 7, 64);
        assert_eq!(
            stamp_check(&v),
            StampCheck::Consistent {
                key_hash: key_hash(b"k"),
                generation: 7
            }
        );
    }

    #[test]
    fn half_and_half_is_torn() {
        let mut v = stamp(b"k", 7, 64);
        v[32..].copy_from_slice(&stamp(b"k", 8, 64)[32..]);
        assert!(matches!(stamp_check(&v), StampCheck::Torn { at: 4, .. }));
    }

    #[test]
    fn two_keys_is_torn() {
        let mut v = stamp(b"a", 3, 32);
        v[8..16].copy_from_slice(&stamp(b"b", 3, 32)[8..16]);
        assert!(matches!(stamp_check(&v), StampCheck::Torn { at: 1, .. }));
    }

    #[test]
    fn zero_is_initial() {
        assert_eq!(stamp_check(&[0u8; 24]).generation(), Some(0));
    }

    #[test]
    fn generations_differ_in_every_word() {
        let a = stamp(b"x", 1, 256);
        let b = stamp(b"x", 2, 256);
        for (wa, wb) in a.chunks(8).zip(b.chunks(8)) {
            assert_ne!(wa, wb);
        }
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a test vectors
        assert_eq!(key_hash(b""), 0x811c9dc5);
        assert_eq!(key_hash(b"a"), 0xe40c292c);
        assert_eq!(key_hash(b"foobar"), 0xbf9cf968);
    }
}
