//! Binary framing for client/server messages:
//! `kind:1 | key_len:1 | key | value_len:4 (LE) | value`.

use crate::api::StoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgKind {
    GetReq = 1,
    GetResp = 2,
    PutReq = 3,
    PutResp = 4,
    CreateReq = 5,
    DelReq = 6,
    Lookup = 16,
    Create = 17,
    AllocBuffers = 18,
    RetireBatch = 19,
    EpochPing = 20,
    Delete = 21,
    Reply = 22,
}

impl MsgKind {
    fn from_u8(v: u8) -> Option<MsgKind> {
        use MsgKind::*;
        Some(match v {
            1 => GetReq,
            2 => GetResp,
            3 => PutReq,
            4 => PutResp,
            5 => CreateReq,
            6 => DelReq,
            16 => Lookup,
            17 => Create,
            18 => AllocBuffers,
            19 => RetireBatch,
            20 => EpochPing,
            21 => Delete,
            22 => Reply,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgKind,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

/// Encoded size of a frame with the given key and value lengths.
pub fn frame_len(key_len: usize, value_len: usize) -> u64 {
    (1 + 1 + key_len + 4 + value_len) as u64
}

impl Frame {
    pub fn new(kind: MsgKind, key: &[u8], value: Vec<u8>) -> Frame {
        Frame {
            kind,
            key: key.to_vec(),
            value,
        }
    }

    pub fn len(&self) -> u64 {
        frame_len(self.key.len(), self.value.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self) -> Vec<u8> {
        assert!(self.key.len() <= u8::MAX as usize, "key longer than 255 bytes");
        let mut out = Vec::with_capacity(self.len() as usize);
        out.push(self.kind as u8);
        out.push(self.key.len() as u8);
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&(self.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.value);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, StoreError> {
        let bad = |m: &str| StoreError::Protocol(m.to_string());
        if bytes.len() < 6 {
            return Err(bad("short frame"));
        }
        let kind = MsgKind::from_u8(bytes[0]).ok_or_else(|| bad("unknown kind"))?;
        let klen = bytes[1] as usize;
        let key = bytes.get(2..2 + klen).ok_or_else(|| bad("truncated key"))?.to_vec();
        let vlen_bytes = bytes.get(2 + klen..6 + klen).ok_or_else(|| bad("truncated length"))?;
        let vlen = u32::from_le_bytes(vlen_bytes.try_into().unwrap()) as usize;
        let value = bytes.get(6 + klen..).ok_or_else(|| bad("truncated value"))?;
        if value.len() != vlen {
            return Err(bad("value length mismatch"));
        }
        Ok(Frame {
            kind,
            key,
            value: value.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let f = Frame::new(MsgKind::PutReq, b"ab", vec![9, 8, 7]);
        assert_eq!(f.encode(), vec![3, 2, b'a', b'b', 3, 0, 0, 0, 9, 8, 7]);
        assert_eq!(f.len(), 11);
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Frame::decode(&[3, 2, b'a']).is_err());
        assert!(Frame::decode(&[99, 0, 0, 0, 0, 0]).is_err());
        assert!(Frame::decode(&[3, 0, 2, 0, 0, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(key in proptest::collection::vec(any::<u8>(), 0..40), value in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = Frame::new(MsgKind::GetResp, &key, value);
            let bytes = f.encode();
            prop_assert_eq!(bytes.len() as u64, f.len());
            prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
        }
    }
}
