use crate::meta::ENTRIES_PER_BLOCK;
use crate::LayoutError;

/// Region sizes of one zone of a segment, in blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentGeometry {
    pub chunk_blocks: u32,
    pub stripes: u32,
    pub group_size: u32,
    pub header_blocks: u32,
    pub footer_blocks: u32,
    pub zone_capacity: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupBounds {
    pub group: u32,
    /// Half-open block offset range within each zone.
    pub start: u32,
    pub end: u32,
}

fn footer_blocks_for(data_blocks: u64) -> u64 {
    data_blocks.div_ceil(ENTRIES_PER_BLOCK as u64)
}

/// Largest stripe count whose data and footer regions fit after a
/// one-chunk header. The group size starts at 1; see
/// [`SegmentGeometry::with_group_size`].
pub fn compute_geometry(zone_capacity: u32, chunk_blocks: u32) -> Result<SegmentGeometry, LayoutError> {
    let too_small = LayoutError::ZoneTooSmall {
        capacity: zone_capacity,
        chunk: chunk_blocks,
    };
    if chunk_blocks == 0 || zone_capacity as u64 <= 2 * chunk_blocks as u64 {
        return Err(too_small);
    }
    let c = chunk_blocks as u64;
    let room = zone_capacity as u64 - c;
    // S*C*(1 + 1/204) <= room bounds S from above.
    let mut s = room * ENTRIES_PER_BLOCK as u64 / (c * (ENTRIES_PER_BLOCK as u64 + 1));
    while s > 0 && s * c + footer_blocks_for(s * c) > room {
        s -= 1;
    }
    while (s + 1) * c + footer_blocks_for((s + 1) * c) <= room {
        s += 1;
    }
    if s == 0 {
        return Err(too_small);
    }
    Ok(SegmentGeometry {
        chunk_blocks,
        stripes: s as u32,
        group_size: 1,
        header_blocks: chunk_blocks,
        footer_blocks: footer_blocks_for(s * c) as u32,
        zone_capacity,
    })
}

impl SegmentGeometry {
    pub fn with_group_size(mut self, group_size: u32) -> Self {
        assert!(group_size >= 1, "group size must be positive");
        self.group_size = group_size;
        self
    }

    pub fn data_blocks(&self) -> u32 {
        self.stripes * self.chunk_blocks
    }

    pub fn data_start(&self) -> u32 {
        self.header_blocks
    }

    pub fn data_end(&self) -> u32 {
        self.header_blocks + self.data_blocks()
    }

    pub fn footer_end(&self) -> u32 {
        self.data_end() + self.footer_blocks
    }

    pub fn num_groups(&self) -> u32 {
        self.stripes.div_ceil(self.group_size)
    }

    pub fn group_of_seq(&self, seq: u32) -> u32 {
        seq / self.group_size
    }

    /// Chunk slot index of a data-region offset.
    pub fn slot_of(&self, offset: u32) -> Result<u32, LayoutError> {
        if offset < self.data_start() || offset >= self.data_end() {
            return Err(LayoutError::OffsetOutsideDataRegion(offset));
        }
        Ok((offset - self.header_blocks) / self.chunk_blocks)
    }

    pub fn slot_offset(&self, slot: u32) -> u32 {
        self.header_blocks + slot * self.chunk_blocks
    }

    pub fn group_range(&self, group: u32) -> GroupBounds {
        let g = self.group_size as u64;
        let c = self.chunk_blocks as u64;
        let start = self.header_blocks as u64 + group as u64 * g * c;
        let end = self.header_blocks as u64 + ((group as u64 + 1) * g).min(self.stripes as u64) * c;
        GroupBounds {
            group,
            start: start as u32,
            end: end as u32,
        }
    }

    pub fn group_bounds(&self, offset: u32) -> Result<GroupBounds, LayoutError> {
        let slot = self.slot_of(offset)?;
        Ok(self.group_range(slot / self.group_size))
    }

    /// First and one-past-last chunk slot of a group.
    pub fn group_slots(&self, group: u32) -> (u32, u32) {
        let start = group as u64 * self.group_size as u64;
        let end = (start + self.group_size as u64).min(self.stripes as u64);
        (start as u32, end as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct search over every stripe count; no algebra shared with the
    // implementation.
    fn oracle(cap: u32, c: u32) -> Option<(u32, u32)> {
        let mut best = None;
        let mut s = 1u64;
        loop {
            let data = s * c as u64;
            let footer = data.div_ceil(204);
            if c as u64 + data + footer > cap as u64 {
                break;
            }
            best = Some((s as u32, footer as u32));
            s += 1;
        }
        best
    }

    #[test]
    fn full_size_zone_with_one_block_chunks() {
        let g = compute_geometry(275_712, 1).unwrap();
        assert_eq!(g.header_blocks, 1);
        assert_eq!(g.data_blocks(), 274_366);
        assert_eq!(g.footer_blocks, 1_345);
        assert_eq!(g.footer_end(), 275_712);
    }

    #[test]
    fn full_size_zone_with_four_block_chunks() {
        let g = compute_geometry(275_712, 4).unwrap();
        let (s, f) = oracle(275_712, 4).unwrap();
        assert_eq!(g.header_blocks, 4);
        assert_eq!((g.stripes, g.footer_blocks), (s, f));
        assert_eq!((s, f), (68_590, 1_345));
        assert!(4 + 4 * g.stripes + g.footer_blocks <= 275_712);
    }

    #[test]
    fn smallest_viable_zone() {
        let g = compute_geometry(3, 1).unwrap();
        assert_eq!((g.header_blocks, g.stripes, g.footer_blocks), (1, 1, 1));
        assert!(compute_geometry(2, 1).is_err());
        assert!(compute_geometry(8, 4).is_err());
    }

    #[test]
    fn matches_search_oracle_on_many_sizes() {
        for cap in (3..3000).step_by(7) {
            for c in [1, 2, 3, 4, 8] {
                match (compute_geometry(cap, c), oracle(cap, c)) {
                    (Ok(g), Some((s, f))) => {
                        assert_eq!((g.stripes, g.footer_blocks), (s, f), "cap {cap} c {c}");
                    }
                    (Err(_), None) => {}
                    (Ok(g), None) => panic!("cap {cap} c {c}: got {g:?}, oracle none"),
                    (Err(_), Some(_)) => {
                        assert!(cap <= 2 * c, "cap {cap} c {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn group_examples() {
        let g = compute_geometry(2048, 1).unwrap().with_group_size(256);
        let b = g.group_bounds(1).unwrap();
        assert_eq!((b.group, b.start, b.end), (0, 1, 257));
        assert_eq!(g.group_bounds(257).unwrap().group, 1);
        assert_eq!(g.group_bounds(0), Err(LayoutError::OffsetOutsideDataRegion(0)));
        let last = g.group_range(g.num_groups() - 1);
        assert_eq!(last.end, g.data_end());
    }
}
