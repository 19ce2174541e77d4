//! Version header and slot encoding.
//!
//! Header word (the CAS unit):
//!
//! ```text
//! bits  0..46  link to the next version's primary copy (0 = NIL)
//! bit  46      B_w: a replicated write holds this tail
//! bit  47      repbit: the link is being installed on all copies
//! bits 48..56  gc version of this slot
//! bits 56..64  gc version expected at the link target
//! ```
//!
//! A link packs `device (6 bits) << 40 | address / 64`. Slot layout:
//! `[header][R-1 extra link words][len:32 | keyhash:32][payload]`.
//! Extra link words name the other copies of the next version and use the
//! same packing as a header's link and link gc, without the flag bits.

use crate::alloc::SLOT_ALIGN;
use crate::fabric::DeviceId;
use crate::stamp::key_hash;

pub const NIL: u64 = 0;
const LINK_MASK: u64 = (1 << 46) - 1;
const BW: u64 = 1 << 46;
const REP: u64 = 1 << 47;
const VALID: u64 = 1 << 63;

/// A slot plus the gc version it is expected to carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub device: DeviceId,
    pub address: u64,
    pub gc: u8,
}

impl SlotRef {
    pub fn link(&self) -> u64 {
        debug_assert!(self.device < 64 && self.address.is_multiple_of(SLOT_ALIGN) && self.address > 0);
        ((self.device as u64) << 40) | (self.address / SLOT_ALIGN)
    }

    pub fn from_link(link: u64, gc: u8) -> SlotRef {
        SlotRef {
            device: ((link & LINK_MASK) >> 40) as DeviceId,
            address: (link & ((1 << 40) - 1)) * SLOT_ALIGN,
            gc,
        }
    }

    /// Identity of the slot, ignoring its gc version.
    pub fn slot(&self) -> (DeviceId, u64) {
        (self.device, self.address)
    }
}

/// All copies of one version; `copies[0]` is the primary.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Version {
    pub copies: Vec<SlotRef>,
}

impl Version {
    pub fn primary(&self) -> SlotRef {
        self.copies[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Header {
    pub link: u64,
    pub bw: bool,
    pub rep: bool,
    pub gc: u8,
    pub link_gc: u8,
}

impl Header {
    pub fn tail(gc: u8) -> Header {
        Header {
            gc,
            ..Header::default()
        }
    }

    pub fn tombstone(gc: u8) -> Header {
        Header {
            bw: true,
            rep: true,
            gc,
            ..Header::default()
        }
    }

    pub fn encode(&self) -> u64 {
        (self.link & LINK_MASK)
            | if self.bw { BW } else { 0 }
            | if self.rep { REP } else { 0 }
            | (self.gc as u64) << 48
            | (self.link_gc as u64) << 56
    }

    pub fn decode(w: u64) -> Header {
        Header {
            link: w & LINK_MASK,
            bw: w & BW != 0,
            rep: w & REP != 0,
            gc: (w >> 48) as u8,
            link_gc: (w >> 56) as u8,
        }
    }

    pub fn is_tombstone(&self) -> bool {
        self.link == NIL && self.bw && self.rep
    }

    pub fn next(&self) -> Option<SlotRef> {
        (self.link != NIL).then(|| SlotRef::from_link(self.link, self.link_gc))
    }

    pub fn linked_to(link: SlotRef, gc: u8) -> Header {
        Header {
            link: link.link(),
            gc,
            link_gc: link.gc,
            ..Header::default()
        }
    }
}

pub fn link_word(to: SlotRef) -> u64 {
    to.link() | (to.gc as u64) << 48
}

pub fn decode_link_word(w: u64) -> Option<SlotRef> {
    let link = w & LINK_MASK;
    (link != NIL).then(|| SlotRef::from_link(link, (w >> 48) as u8))
}

/// Shortcut word: valid bit, target gc, target link.
pub fn shortcut_word(to: SlotRef) -> u64 {
    VALID | link_word(to)
}

pub fn decode_shortcut(w: u64) -> Option<SlotRef> {
    if w & VALID == 0 {
        return None;
    }
    decode_link_word(w & !VALID)
}

/// 32-bit key tag kept in every slot; never zero, so zeroed memory never
/// matches.
pub fn key_tag(key: &[u8]) -> u32 {
    key_hash(key) | 1
}

fn word(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

/// Geometry of a key's slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub replication: usize,
    pub size: u64,
}

impl SlotLayout {
    pub fn new(replication: usize, size: u64) -> Self {
        assert!(replication >= 1);
        SlotLayout { replication, size }
    }

    /// Header plus extra link words.
    pub fn links_len(&self) -> u64 {
        8 * self.replication as u64
    }

    /// Links plus the len word.
    pub fn prefix_len(&self) -> u64 {
        self.links_len() + 8
    }

    pub fn slot_len(&self) -> u64 {
        self.prefix_len() + self.size
    }

    pub fn class(&self) -> u64 {
        crate::alloc::size_class(self.slot_len())
    }

    /// Bytes written for a new version holding `value`.
    pub fn encode(&self, gc: u8, key: &[u8], value: &[u8]) -> Vec<u8> {
        assert!(value.len() as u64 <= self.size);
        let mut out = Vec::with_capacity((self.prefix_len() as usize) + value.len());
        out.extend_from_slice(&Header::tail(gc).encode().to_le_bytes());
        out.resize(self.links_len() as usize, 0);
        let len = (value.len() as u64) | (key_tag(key) as u64) << 32;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(value);
        out
    }

    /// Header and extra link words naming `next`.
    pub fn encode_links(&self, header: Header, next: &Version) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.links_len() as usize);
        out.extend_from_slice(&header.encode().to_le_bytes());
        for c in next.copies.iter().skip(1) {
            out.extend_from_slice(&link_word(*c).to_le_bytes());
        }
        out.resize(self.links_len() as usize, 0);
        out
    }

    /// Decodes a slot read (at least the links).
    pub fn decode(&self, bytes: &[u8]) -> SlotView {
        let header = Header::decode(word(bytes, 0));
        let ext = (1..self.replication)
            .map(|i| decode_link_word(word(bytes, 8 * i)))
            .collect();
        let (len, tag) = if bytes.len() as u64 >= self.prefix_len() {
            let w = word(bytes, self.links_len() as usize);
            (Some(w & 0xffff_ffff), (w >> 32) as u32)
        } else {
            (None, 0)
        };
        let payload = match len {
            Some(n) if n <= self.size && bytes.len() as u64 >= self.prefix_len() + n => {
                let at = self.prefix_len() as usize;
                Some(bytes[at..at + n as usize].to_vec())
            }
            _ => None,
        };
        SlotView {
            header,
            ext,
            tag,
            payload,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotView {
    pub header: Header,
    pub ext: Vec<Option<SlotRef>>,
    pub tag: u32,
    pub payload: Option<Vec<u8>>,
}

impl SlotView {
    /// The next version named by this slot's links, if any.
    pub fn next(&self) -> Option<Version> {
        let primary = self.header.next()?;
        let mut copies = vec![primary];
        copies.extend(self.ext.iter().flatten());
        Some(Version { copies })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_fields_are_independent() {
        let h = Header {
            link: LINK_MASK,
            bw: false,
            rep: true,
            gc: 0xAB,
            link_gc: 0xCD,
        };
        let w = h.encode();
        assert_eq!(w >> 56, 0xCD);
        assert_eq!((w >> 48) & 0xff, 0xAB);
        assert_eq!(w & BW, 0);
        assert_eq!(Header::decode(w), h);
        assert_eq!(Header::decode(0), Header::tail(0));
    }

    #[test]
    fn tombstone_is_distinct_from_inflight_write() {
        let t = Header::tombstone(3);
        assert!(t.is_tombstone());
        let inflight = Header {
            bw: true,
            ..Header::tail(3)
        };
        assert!(!inflight.is_tombstone());
        assert_ne!(t.encode(), Header::tail(3).encode());
    }

    #[test]
    fn slot_layout_sizes() {
        let l = SlotLayout::new(1, 1024);
        assert_eq!(l.slot_len(), 1040);
        assert_eq!(l.class(), 1088);
        let l3 = SlotLayout::new(3, 1024);
        assert_eq!(l3.prefix_len(), 32);
    }

    #[test]
    fn shortcut_requires_valid_bit() {
        let s = SlotRef {
            device: 2,
            address: 4096,
            gc: 7,
        };
        assert_eq!(decode_shortcut(shortcut_word(s)), Some(s));
        assert_eq!(decode_shortcut(link_word(s)), None);
        assert_eq!(decode_shortcut(0), None);
    }

    #[test]
    fn zeroed_slot_never_matches_a_key() {
        let l = SlotLayout::new(1, 16);
        let v = l.decode(&[0; 32]);
        assert_ne!(v.tag, key_tag(b""));
        assert_ne!(v.tag, key_tag(b"k"));
    }

    proptest! {
        #[test]
        fn link_roundtrip(device in 0u16..64, idx in 1u64..(1 << 40), gc in any::<u8>()) {
            let s = SlotRef { device, address: idx * 64, gc };
            prop_assert_eq!(SlotRef::from_link(s.link(), gc), s);
            prop_assert_eq!(decode_link_word(link_word(s)), Some(s));
            let h = Header::linked_to(s, 9);
            prop_assert_eq!(Header::decode(h.encode()).next(), Some(s));
        }

        #[test]
        fn slot_roundtrip(r in 1usize..4, value in proptest::collection::vec(any::<u8>(), 0..64), gc in any::<u8>()) {
            let l = SlotLayout::new(r, 64);
            let mut bytes = l.encode(gc, b"key", &value);
            bytes.resize(l.slot_len() as usize, 0xEE);
            let v = l.decode(&bytes);
            prop_assert_eq!(v.header, Header::tail(gc));
            prop_assert_eq!(v.tag, key_tag(b"key"));
            prop_assert_eq!(v.next(), None);
            prop_assert_eq!(v.payload, Some(value));
        }

        #[test]
        fn links_roundtrip(r in 1usize..4, base in 1u64..1000) {
            let l = SlotLayout::new(r, 8);
            let next = Version { copies: (0..r).map(|i| SlotRef { device: i as u16, address: (base + i as u64) * 64, gc: i as u8 }).collect() };
            let bytes = l.encode_links(Header::linked_to(next.primary(), 1), &next);
            prop_assert_eq!(l.decode(&bytes).next(), Some(next));
        }
    }
}
