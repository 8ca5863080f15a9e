//! Segment descriptor and its header-region encoding.
//!
//! Block 0 of the header region (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 0..8 | magic `ZNSRSEG1` |
//! | 8..10 | format version (1) |
//! | 10 | scheme code (0, 1, 4, 5, 6) |
//! | 11 | k |
//! | 12 | m |
//! | 13 | write mode (0 zone write, 1 zone append) |
//! | 14 | class (0 small chunk, 1 large chunk) |
//! | 15 | zero |
//! | 16..20 | chunk blocks C |
//! | 20..24 | group size G |
//! | 24..28 | stripes S |
//! | 28..32 | zone capacity |
//! | 32..36 | segment id |
//! | 36..38 | zone count n |
//! | 38..40 | zero |
//! | 40..40+4n | zone id per drive |
//! | 4092..4096 | CRC-32 of bytes 0..4092 |
//!
//! The remaining `C - 1` header blocks are zero. Every zone of a segment
//! carries the same header.

use erasure_codec::{RaidKind, RaidScheme};
use zns_device::{zeroed_page, Page, BLOCK_SIZE};

use crate::{compute_geometry, LayoutError, SegmentGeometry};

pub const HEADER_MAGIC: [u8; 8] = *b"ZNSRSEG1";
const VERSION: u16 = 1;
const MAX_ZONES: usize = (BLOCK_SIZE - 4 - 40) / 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WriteMode {
    ZoneWrite,
    ZoneAppend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentClass {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentState {
    Open,
    Sealed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentDescriptor {
    pub segment_id: u32,
    /// One zone per drive, indexed by drive.
    pub zone_ids: Vec<u32>,
    pub state: SegmentState,
    pub scheme: RaidScheme,
    pub geometry: SegmentGeometry,
    pub mode: WriteMode,
    pub class: SegmentClass,
}

impl SegmentDescriptor {
    pub fn chunk_blocks(&self) -> u32 {
        self.geometry.chunk_blocks
    }

    pub fn group_size(&self) -> u32 {
        self.geometry.group_size
    }
}

fn corrupt(msg: impl Into<String>) -> LayoutError {
    LayoutError::CorruptHeader(msg.into())
}

/// Encodes the `C` header blocks written to each zone. The state field is
/// not persisted; it follows from zone states.
pub fn serialize_header(desc: &SegmentDescriptor) -> Vec<Box<Page>> {
    assert!(desc.zone_ids.len() <= MAX_ZONES, "too many zones for one header block");
    let g = &desc.geometry;
    let mut b = zeroed_page();
    b[0..8].copy_from_slice(&HEADER_MAGIC);
    b[8..10].copy_from_slice(&VERSION.to_le_bytes());
    b[10] = desc.scheme.kind.code();
    b[11] = desc.scheme.k as u8;
    b[12] = desc.scheme.m as u8;
    b[13] = match desc.mode {
        WriteMode::ZoneWrite => 0,
        WriteMode::ZoneAppend => 1,
    };
    b[14] = match desc.class {
        SegmentClass::Small => 0,
        SegmentClass::Large => 1,
    };
    b[16..20].copy_from_slice(&g.chunk_blocks.to_le_bytes());
    b[20..24].copy_from_slice(&g.group_size.to_le_bytes());
    b[24..28].copy_from_slice(&g.stripes.to_le_bytes());
    b[28..32].copy_from_slice(&g.zone_capacity.to_le_bytes());
    b[32..36].copy_from_slice(&desc.segment_id.to_le_bytes());
    b[36..38].copy_from_slice(&(desc.zone_ids.len() as u16).to_le_bytes());
    for (i, z) in desc.zone_ids.iter().enumerate() {
        b[40 + 4 * i..44 + 4 * i].copy_from_slice(&z.to_le_bytes());
    }
    let crc = crc32fast::hash(&b[..BLOCK_SIZE - 4]);
    b[BLOCK_SIZE - 4..].copy_from_slice(&crc.to_le_bytes());
    let mut out = vec![b];
    out.extend((1..g.chunk_blocks).map(|_| zeroed_page()));
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4"))
}

/// Decodes header block 0.
pub fn parse_header(block: &[u8]) -> Result<SegmentDescriptor, LayoutError> {
    if block.len() != BLOCK_SIZE {
        return Err(corrupt("wrong block size"));
    }
    if block[0..8] != HEADER_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if crc32fast::hash(&block[..BLOCK_SIZE - 4]) != u32_at(block, BLOCK_SIZE - 4) {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u16::from_le_bytes([block[8], block[9]]);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = RaidKind::from_code(block[10]).ok_or_else(|| corrupt("unknown scheme"))?;
    let scheme = RaidScheme::new(kind, block[11] as usize, block[12] as usize).map_err(|e| corrupt(e.to_string()))?;
    let mode = match block[13] {
        0 => WriteMode::ZoneWrite,
        1 => WriteMode::ZoneAppend,
        v => return Err(corrupt(format!("unknown mode {v}"))),
    };
    let class = match block[14] {
        0 => SegmentClass::Small,
        1 => SegmentClass::Large,
        v => return Err(corrupt(format!("unknown class {v}"))),
    };
    let chunk = u32_at(block, 16);
    let group = u32_at(block, 20);
    let stripes = u32_at(block, 24);
    let capacity = u32_at(block, 28);
    let geometry = compute_geometry(capacity, chunk).map_err(|e| corrupt(e.to_string()))?;
    if geometry.stripes != stripes || group == 0 {
        return Err(corrupt("geometry does not match zone capacity"));
    }
    let n = u16::from_le_bytes([block[36], block[37]]) as usize;
    if n != scheme.width() || n > MAX_ZONES {
        return Err(corrupt("zone count does not match scheme"));
    }
    Ok(SegmentDescriptor {
        segment_id: u32_at(block, 32),
        zone_ids: (0..n).map(|i| u32_at(block, 40 + 4 * i)).collect(),
        state: SegmentState::Open,
        scheme,
        geometry: geometry.with_group_size(group),
        mode,
        class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(group: u32) -> SegmentDescriptor {
        SegmentDescriptor {
            segment_id: 42,
            zone_ids: vec![3, 9, 1, 7],
            state: SegmentState::Open,
            scheme: RaidScheme::four_drive(RaidKind::Raid5),
            geometry: compute_geometry(1024, 2).unwrap().with_group_size(group),
            mode: if group == 1 {
                WriteMode::ZoneWrite
            } else {
                WriteMode::ZoneAppend
            },
            class: SegmentClass::Small,
        }
    }

    #[test]
    fn round_trip() {
        for g in [1, 4, 256] {
            let d = desc(g);
            let blocks = serialize_header(&d);
            assert_eq!(blocks.len(), 2);
            assert!(blocks[1].iter().all(|&b| b == 0));
            assert_eq!(parse_header(&blocks[0][..]).unwrap(), d);
        }
    }

    #[test]
    fn empty_block_is_corrupt() {
        assert!(matches!(
            parse_header(&[0u8; BLOCK_SIZE]),
            Err(LayoutError::CorruptHeader(_))
        ));
    }

    #[test]
    fn flipped_bit_is_corrupt() {
        let mut b = serialize_header(&desc(4)).remove(0);
        b[33] ^= 0x10;
        assert!(parse_header(&b[..]).is_err());
    }
}
