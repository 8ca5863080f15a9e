//! Compact stripe table for Zone Append segments.
//!
//! One entry per (drive, chunk slot) holding the stripe's id within its
//! group, `seq mod G`, packed little-endian into the smallest whole number
//! of bytes that fits `ceil(log2 G)` bits. A side bitmap records which slots
//! have been set, so an unwritten slot never matches id 0 during a scan.

use bitvec::prelude::*;

use crate::{LayoutError, SegmentGeometry};

fn log2_ceil(g: u64) -> u64 {
    if g <= 1 {
        0
    } else {
        64 - (g - 1).leading_zeros() as u64
    }
}

/// Bytes per stored entry.
pub fn cst_entry_bytes(group_size: u32) -> usize {
    log2_ceil(group_size as u64).div_ceil(8) as usize
}

/// Upper bound in bits for a table covering every zone of an array of
/// `drives` drives with `zones` zones each, `stripes` slots per zone.
pub fn cst_max_bits(drives: u64, stripes: u64, zones: u64, group_size: u32) -> u128 {
    drives as u128 * stripes as u128 * zones as u128 * log2_ceil(group_size as u64) as u128
}

pub fn cst_max_bytes(drives: u64, stripes: u64, zones: u64, group_size: u32) -> u128 {
    cst_max_bits(drives, stripes, zones, group_size).div_ceil(8)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompactStripeTable {
    drives: usize,
    stripes: u32,
    group_size: u32,
    width: usize,
    entries: Vec<u8>,
    occupied: BitVec,
}

/// Outcome of searching the other drives of a group for one stripe id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CstScan {
    /// (drive, slot) of each chunk found.
    pub found: Vec<(usize, u32)>,
    pub inspected: usize,
}

impl CompactStripeTable {
    pub fn new(drives: usize, geometry: &SegmentGeometry) -> Result<Self, LayoutError> {
        if geometry.group_size <= 1 {
            return Err(LayoutError::NotAnAppendSegment);
        }
        let width = cst_entry_bytes(geometry.group_size);
        let cells = drives * geometry.stripes as usize;
        Ok(CompactStripeTable {
            drives,
            stripes: geometry.stripes,
            group_size: geometry.group_size,
            width,
            entries: vec![0; cells * width],
            occupied: bitvec![0; cells],
        })
    }

    pub fn group_size(&self) -> u32 {
        self.group_size
    }

    pub fn entry_bytes(&self) -> usize {
        self.width
    }

    /// Bytes held by the packed entries.
    pub fn memory_bytes(&self) -> usize {
        self.entries.len()
    }

    fn cell(&self, drive: usize, slot: u32) -> usize {
        assert!(drive < self.drives && slot < self.stripes, "cst index out of range");
        drive * self.stripes as usize + slot as usize
    }

    pub fn set(&mut self, drive: usize, slot: u32, stripe_in_group: u32) -> Result<(), LayoutError> {
        if stripe_in_group >= self.group_size {
            return Err(LayoutError::StripeIdOutOfRange {
                id: stripe_in_group,
                group_size: self.group_size,
            });
        }
        let c = self.cell(drive, slot);
        let bytes = stripe_in_group.to_le_bytes();
        self.entries[c * self.width..(c + 1) * self.width].copy_from_slice(&bytes[..self.width]);
        self.occupied.set(c, true);
        Ok(())
    }

    pub fn lookup(&self, drive: usize, slot: u32) -> Option<u32> {
        let c = self.cell(drive, slot);
        if !self.occupied[c] {
            return None;
        }
        let mut b = [0u8; 4];
        b[..self.width].copy_from_slice(&self.entries[c * self.width..(c + 1) * self.width]);
        Some(u32::from_le_bytes(b))
    }

    pub fn clear(&mut self) {
        self.entries.fill(0);
        self.occupied.fill(false);
    }

    /// Scans slots `slots.0..slots.1` of each drive in `drives` for
    /// `stripe_in_group`, stopping per drive at the first hit.
    pub fn scan(&self, slots: (u32, u32), drives: &[usize], stripe_in_group: u32) -> CstScan {
        let mut out = CstScan::default();
        for &d in drives {
            for slot in slots.0..slots.1 {
                out.inspected += 1;
                if self.lookup(d, slot) == Some(stripe_in_group) {
                    out.found.push((d, slot));
                    break;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute_geometry;

    #[test]
    fn entry_widths() {
        assert_eq!(cst_entry_bytes(1), 0);
        assert_eq!(cst_entry_bytes(2), 1);
        assert_eq!(cst_entry_bytes(256), 1);
        assert_eq!(cst_entry_bytes(257), 2);
        assert_eq!(cst_entry_bytes(4096), 2);
    }

    #[test]
    fn full_scale_bound() {
        let bytes = cst_max_bytes(4, 274_160, 3_690, 256);
        assert_eq!(bytes, 4 * 274_160 * 3_690);
        let gib = bytes as f64 / (1u64 << 30) as f64;
        assert!((gib - 3.77).abs() / 3.77 < 0.01, "{gib}");
    }

    #[test]
    fn set_lookup_and_scan() {
        let g = compute_geometry(600, 1).unwrap().with_group_size(4);
        let mut t = CompactStripeTable::new(4, &g).unwrap();
        assert_eq!(t.lookup(0, 0), None);
        t.set(0, 0, 2).unwrap();
        t.set(1, 3, 2).unwrap();
        t.set(2, 1, 0).unwrap();
        assert_eq!(t.lookup(0, 0), Some(2));
        let s = t.scan((0, 4), &[1, 2, 3], 2);
        assert_eq!(s.found, vec![(1, 3)]);
        assert_eq!(s.inspected, 4 + 4 + 4);
        assert_eq!(
            t.set(0, 1, 4),
            Err(LayoutError::StripeIdOutOfRange { id: 4, group_size: 4 })
        );
    }

    #[test]
    fn two_byte_entries() {
        let g = compute_geometry(9000, 1).unwrap().with_group_size(4096);
        let mut t = CompactStripeTable::new(3, &g).unwrap();
        t.set(2, 8000, 4095).unwrap();
        assert_eq!(t.lookup(2, 8000), Some(4095));
        assert_eq!(t.memory_bytes(), 3 * g.stripes as usize * 2);
    }

    #[test]
    fn static_segments_have_no_table() {
        let g = compute_geometry(600, 1).unwrap();
        assert_eq!(CompactStripeTable::new(4, &g), Err(LayoutError::NotAnAppendSegment));
    }
}
