//! Per-block metadata: the 20-byte record kept in footers and the 64-byte
//! out-of-band area written with every block.

use zns_device::OOB_SIZE;

use crate::LayoutError;

pub const META_ENTRY_BYTES: usize = 20;
pub const ENTRIES_PER_BLOCK: usize = 4096 / META_ENTRY_BYTES;

/// LBA written into padding blocks and non-data blocks.
pub const INVALID_LBA: u64 = u64::MAX;

/// Number of L2P entries covered by one mapping block.
pub const MAPPING_GROUP_ENTRIES: u64 = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct BlockMeta {
    pub lba: u64,
    pub timestamp: u64,
    pub stripe_id: u32,
}

impl BlockMeta {
    pub fn new(lba: u64, timestamp: u64, stripe_id: u32) -> Self {
        BlockMeta {
            lba,
            timestamp,
            stripe_id,
        }
    }

    pub fn to_bytes(&self) -> [u8; META_ENTRY_BYTES] {
        let mut b = [0u8; META_ENTRY_BYTES];
        b[0..8].copy_from_slice(&self.lba.to_le_bytes());
        b[8..16].copy_from_slice(&self.timestamp.to_le_bytes());
        b[16..20].copy_from_slice(&self.stripe_id.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        BlockMeta {
            lba: u64::from_le_bytes(b[0..8].try_into().expect("8")),
            timestamp: u64::from_le_bytes(b[8..16].try_into().expect("8")),
            stripe_id: u32::from_le_bytes(b[16..20].try_into().expect("4")),
        }
    }
}

/// Mapping blocks are tagged by setting bit 0 of the LBA of the first entry
/// they cover. User LBAs are block aligned, so the bit is otherwise clear.
pub fn mapping_lba(group: u64) -> u64 {
    (group * MAPPING_GROUP_ENTRIES * 4096) | 1
}

pub fn is_mapping_lba(lba: u64) -> bool {
    lba != INVALID_LBA && lba & 1 == 1
}

pub fn mapping_group_of(lba: u64) -> u64 {
    (lba & !1) / (MAPPING_GROUP_ENTRIES * 4096)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum BlockKind {
    Data = 1,
    Parity = 2,
    Header = 3,
    Footer = 4,
}

impl BlockKind {
    fn from_u8(v: u8) -> Option<BlockKind> {
        Some(match v {
            1 => BlockKind::Data,
            2 => BlockKind::Parity,
            3 => BlockKind::Header,
            4 => BlockKind::Footer,
            _ => return None,
        })
    }
}

/// Decoded out-of-band area.
///
/// Byte layout, little-endian: `0..8` LBA, `8..16` timestamp, `16..20`
/// stripe id, `20` kind, `21` stripe position, `22..24` zero, `24..28`
/// segment id, `28..60` zero, `60..64` CRC-32 of bytes `0..60`. An all-zero
/// area is an unwritten block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Oob {
    pub meta: BlockMeta,
    pub kind: BlockKind,
    pub position: u8,
    pub segment_id: u32,
}

impl Oob {
    pub fn encode(&self) -> [u8; OOB_SIZE] {
        let mut b = [0u8; OOB_SIZE];
        b[0..20].copy_from_slice(&self.meta.to_bytes());
        b[20] = self.kind as u8;
        b[21] = self.position;
        b[24..28].copy_from_slice(&self.segment_id.to_le_bytes());
        let crc = crc32fast::hash(&b[0..60]);
        b[60..64].copy_from_slice(&crc.to_le_bytes());
        b
    }

    /// `Ok(None)` for an unwritten block.
    pub fn decode(b: &[u8; OOB_SIZE]) -> Result<Option<Oob>, LayoutError> {
        if b.iter().all(|&x| x == 0) {
            return Ok(None);
        }
        let crc = u32::from_le_bytes(b[60..64].try_into().expect("4"));
        if crc != crc32fast::hash(&b[0..60]) {
            return Err(LayoutError::CorruptOob);
        }
        let kind = BlockKind::from_u8(b[20]).ok_or(LayoutError::CorruptOob)?;
        Ok(Some(Oob {
            meta: BlockMeta::from_bytes(&b[0..20]),
            kind,
            position: b[21],
            segment_id: u32::from_le_bytes(b[24..28].try_into().expect("4")),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_per_block() {
        assert_eq!(ENTRIES_PER_BLOCK, 204);
    }

    #[test]
    fn meta_round_trip() {
        let m = BlockMeta::new(0xdead_beef_000, 77, 12345);
        assert_eq!(BlockMeta::from_bytes(&m.to_bytes()), m);
    }

    #[test]
    fn mapping_marker() {
        let lba = mapping_lba(3);
        assert_eq!(lba, 3 * 1024 * 4096 + 1);
        assert!(is_mapping_lba(lba));
        assert_eq!(mapping_group_of(lba), 3);
        assert!(!is_mapping_lba(4096 * 5));
        assert!(!is_mapping_lba(INVALID_LBA));
    }

    #[test]
    fn oob_round_trip_and_hole() {
        let o = Oob {
            meta: BlockMeta::new(4096, 9, 2),
            kind: BlockKind::Parity,
            position: 3,
            segment_id: 17,
        };
        let b = o.encode();
        assert_eq!(Oob::decode(&b).unwrap(), Some(o));
        assert_eq!(Oob::decode(&[0u8; OOB_SIZE]).unwrap(), None);
        let mut bad = b;
        bad[3] ^= 1;
        assert_eq!(Oob::decode(&bad), Err(LayoutError::CorruptOob));
    }
}
