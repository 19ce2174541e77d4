//! On-device framing of a direct-store space.
//!
//! Lock variant: `[lock][begin tag][len][payload...][end tag]`
//! CRC variant:  `[lock][crc32c (low) | len (high)][payload...]`
//!
//! The lock word sits at offset 0; everything after it is the frame, which
//! is written in one operation.

use crc::{Crc, CRC_32_ISCSI};

pub const CASTAGNOLI: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Lock,
    Crc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub variant: Variant,
    /// Payload capacity, a multiple of 8.
    pub cap: u64,
}

fn word(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

impl Layout {
    pub fn new(variant: Variant, size: u64) -> Layout {
        Layout {
            variant,
            cap: size.div_ceil(8) * 8,
        }
    }

    /// Bytes of one space, lock word included.
    pub fn space_size(&self) -> u64 {
        8 + self.frame_len()
    }

    pub fn frame_len(&self) -> u64 {
        match self.variant {
            Variant::Lock => 8 + 8 + self.cap + 8,
            Variant::Crc => 8 + self.cap,
        }
    }

    /// Offset of the frame within the space.
    pub const FRAME_OFFSET: u64 = 8;

    /// Offset of the frame's last byte within the space.
    pub fn last_byte(&self) -> u64 {
        Self::FRAME_OFFSET + self.frame_len() - 1
    }

    pub fn encode(&self, tag: u64, value: &[u8]) -> Vec<u8> {
        assert!(value.len() as u64 <= self.cap);
        let mut out = Vec::with_capacity(self.frame_len() as usize);
        match self.variant {
            Variant::Lock => {
                out.extend_from_slice(&tag.to_le_bytes());
                out.extend_from_slice(&(value.len() as u64).to_le_bytes());
                out.extend_from_slice(value);
                out.resize(16 + self.cap as usize, 0);
                out.extend_from_slice(&tag.to_le_bytes());
            }
            Variant::Crc => {
                let crc = CASTAGNOLI.checksum(value) as u64;
                out.extend_from_slice(&(crc | ((value.len() as u64) << 32)).to_le_bytes());
                out.extend_from_slice(value);
                out.resize(8 + self.cap as usize, 0);
            }
        }
        out
    }

    /// Returns the payload if the frame is intact.
    pub fn decode(&self, frame: &[u8]) -> Option<Vec<u8>> {
        if frame.len() as u64 != self.frame_len() {
            return None;
        }
        match self.variant {
            Variant::Lock => {
                let begin = word(frame, 0);
                let len = word(frame, 8);
                let end = word(frame, 16 + self.cap as usize);
                (begin == end && len <= self.cap).then(|| frame[16..16 + len as usize].to_vec())
            }
            Variant::Crc => {
                let head = word(frame, 0);
                let len = head >> 32;
                if len > self.cap {
                    return None;
                }
                let payload = &frame[8..8 + len as usize];
                (CASTAGNOLI.checksum(payload) as u64 == head & 0xffff_ffff).then(|| payload.to_vec())
            }
        }
    }

    /// Tag of a lock-variant frame (for tests).
    pub fn begin_tag(&self, frame: &[u8]) -> u64 {
        word(frame, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sizes() {
        let l = Layout::new(Variant::Lock, 1024);
        assert_eq!(l.space_size(), 8 + 8 + 8 + 1024 + 8);
        let c = Layout::new(Variant::Crc, 1020);
        assert_eq!(c.cap, 1024);
        assert_eq!(c.space_size(), 8 + 8 + 1024);
    }

    #[test]
    fn castagnoli_check_value() {
        // CRC-32C check value for "123456789"
        assert_eq!(CASTAGNOLI.checksum(b"123456789"), 0xe306_9283);
        assert_eq!(CASTAGNOLI.checksum(b""), 0);
    }

    #[test]
    fn fresh_zero_frames_are_valid_and_empty() {
        for v in [Variant::Lock, Variant::Crc] {
            let l = Layout::new(v, 64);
            assert_eq!(l.decode(&vec![0; l.frame_len() as usize]), Some(vec![]));
        }
    }

    #[test]
    fn torn_lock_frame_detected() {
        let l = Layout::new(Variant::Lock, 32);
        let old = l.encode(1, &[1; 32]);
        let new = l.encode(2, &[2; 32]);
        let mut mixed = new[..24].to_vec();
        mixed.extend_from_slice(&old[24..]);
        assert_eq!(l.decode(&mixed), None);
    }

    proptest! {
        #[test]
        fn roundtrip(value in proptest::collection::vec(any::<u8>(), 0..100), tag in 1u64.., crc in any::<bool>()) {
            let l = Layout::new(if crc { Variant::Crc } else { Variant::Lock }, 100);
            let f = l.encode(tag, &value);
            prop_assert_eq!(f.len() as u64, l.frame_len());
            prop_assert_eq!(l.decode(&f), Some(value));
        }

        // Any word-prefix mix of two distinct CRC frames is rejected or
        // equals one of them.
        #[test]
        fn crc_prefix_mix(a in proptest::collection::vec(any::<u8>(), 64), b in proptest::collection::vec(any::<u8>(), 64), cut in 0usize..9) {
            let l = Layout::new(Variant::Crc, 64);
            let fa = l.encode(0, &a);
            let fb = l.encode(0, &b);
            let mut mixed = fb[..cut * 8].to_vec();
            mixed.extend_from_slice(&fa[cut * 8..]);
            if let Some(v) = l.decode(&mixed) {
                prop_assert!(v == a || v == b);
            }
        }
    }
}
