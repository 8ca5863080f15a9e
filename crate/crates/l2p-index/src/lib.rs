//! Logical-to-physical block table with bounded memory.
//!
//! Entries are 4-byte physical block addresses grouped 1024 at a time, so
//! one group serializes to exactly one 4 KiB mapping block. At most
//! `cap_groups` groups stay resident; beyond that a CLOCK hand picks a
//! victim. Clean victims are dropped. Dirty victims are handed back to the
//! caller as mapping blocks to be written through the normal stripe path;
//! until that write is durable the evicted contents stay in a writeback
//! buffer and can be re-materialized without device I/O.
//!
//! The index does no I/O itself. When a group must come from the device,
//! [`L2pIndex::ensure`] returns the mapping block's address and the caller
//! later passes the decoded block to [`L2pIndex::install`].

use std::collections::HashMap;

pub const GROUP_ENTRIES: usize = 1024;
pub const MAPPING_BLOCK_BYTES: usize = GROUP_ENTRIES * 4;

/// Entry value of an unmapped LBA.
pub const UNMAPPED: u32 = u32::MAX;

pub type Group = Box<[u32; GROUP_ENTRIES]>;

fn empty_group() -> Group {
    vec![UNMAPPED; GROUP_ENTRIES]
        .into_boxed_slice()
        .try_into()
        .expect("GROUP_ENTRIES")
}

pub fn serialize_group(entries: &[u32; GROUP_ENTRIES]) -> Box<[u8; MAPPING_BLOCK_BYTES]> {
    let mut out: Box<[u8; MAPPING_BLOCK_BYTES]> = vec![0u8; MAPPING_BLOCK_BYTES]
        .into_boxed_slice()
        .try_into()
        .expect("MAPPING_BLOCK_BYTES");
    for (i, e) in entries.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&e.to_le_bytes());
    }
    out
}

pub fn parse_group(bytes: &[u8]) -> Group {
    assert_eq!(bytes.len(), MAPPING_BLOCK_BYTES, "mapping block size");
    let mut g = empty_group();
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        g[i] = u32::from_le_bytes(c.try_into().expect("4"));
    }
    g
}

pub fn group_of(lba: u64) -> u64 {
    lba / GROUP_ENTRIES as u64
}

/// What the caller must do before touching a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ensure {
    Resident,
    /// Read the mapping block at this address and pass it to `install`.
    Fetch(u32),
}

/// A dirty group evicted from memory, to be persisted as a mapping block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Writeback {
    pub group: u64,
    pub generation: u64,
    pub block: Box<[u8; MAPPING_BLOCK_BYTES]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SetOutcome {
    /// Previous entry, if mapped.
    pub old: Option<u32>,
    /// Mapping block that no longer describes the group.
    pub stale_mapping: Option<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct L2pStats {
    pub fetches: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub max_resident: usize,
}

#[derive(Clone, Debug)]
struct Frame {
    group: u64,
    referenced: bool,
}

#[derive(Clone, Debug)]
struct Resident {
    entries: Group,
    dirty: bool,
    frame: usize,
}

#[derive(Clone, Debug)]
pub struct L2pIndex {
    logical_blocks: u64,
    cap_groups: usize,
    resident: HashMap<u64, Resident>,
    frames: Vec<Option<Frame>>,
    free_frames: Vec<usize>,
    hand: usize,
    pins: HashMap<u64, u32>,
    generation: HashMap<u64, u64>,
    directory: HashMap<u64, u32>,
    writeback: HashMap<u64, (u64, Group)>,
    stats: L2pStats,
}

impl L2pIndex {
    pub fn new(logical_blocks: u64, cap_groups: usize) -> Self {
        L2pIndex {
            logical_blocks,
            cap_groups: cap_groups.max(1),
            resident: HashMap::new(),
            frames: Vec::new(),
            free_frames: Vec::new(),
            hand: 0,
            pins: HashMap::new(),
            generation: HashMap::new(),
            directory: HashMap::new(),
            writeback: HashMap::new(),
            stats: L2pStats::default(),
        }
    }

    pub fn logical_blocks(&self) -> u64 {
        self.logical_blocks
    }

    pub fn total_groups(&self) -> u64 {
        self.logical_blocks.div_ceil(GROUP_ENTRIES as u64)
    }

    pub fn cap_groups(&self) -> usize {
        self.cap_groups
    }

    pub fn resident_groups(&self) -> usize {
        self.resident.len()
    }

    pub fn is_resident(&self, group: u64) -> bool {
        self.resident.contains_key(&group)
    }

    pub fn stats(&self) -> L2pStats {
        self.stats
    }

    pub fn directory(&self) -> &HashMap<u64, u32> {
        &self.directory
    }

    pub fn directory_entry(&self, group: u64) -> Option<u32> {
        self.directory.get(&group).copied()
    }

    pub fn hand(&self) -> usize {
        self.hand
    }

    fn make_resident(&mut self, group: u64, entries: Group, dirty: bool) {
        let frame = match self.free_frames.pop() {
            Some(f) => f,
            None => {
                self.frames.push(None);
                self.frames.len() - 1
            }
        };
        self.frames[frame] = Some(Frame {
            group,
            referenced: true,
        });
        self.resident.insert(group, Resident { entries, dirty, frame });
        self.stats.max_resident = self.stats.max_resident.max(self.resident.len());
    }

    fn touch(&mut self, group: u64) {
        let f = self.resident[&group].frame;
        if let Some(fr) = self.frames[f].as_mut() {
            fr.referenced = true;
        }
    }

    /// Makes `group` resident if that needs no device read.
    pub fn ensure(&mut self, group: u64) -> Ensure {
        if self.resident.contains_key(&group) {
            self.touch(group);
            return Ensure::Resident;
        }
        if let Some((_, g)) = self.writeback.get(&group) {
            let g = g.clone();
            self.make_resident(group, g, false);
            return Ensure::Resident;
        }
        match self.directory.get(&group) {
            Some(&pba) => Ensure::Fetch(pba),
            None => {
                self.make_resident(group, empty_group(), false);
                Ensure::Resident
            }
        }
    }

    /// Completes a fetch started by `ensure`. Ignored if the group became
    /// resident in the meantime.
    pub fn install(&mut self, group: u64, entries: Group) {
        if self.resident.contains_key(&group) {
            return;
        }
        self.stats.fetches += 1;
        let entries = match self.writeback.get(&group) {
            Some((_, g)) => g.clone(),
            None => entries,
        };
        self.make_resident(group, entries, false);
    }

    /// Entry for a resident LBA. Panics if the group is not resident.
    pub fn get(&mut self, lba: u64) -> Option<u32> {
        let group = group_of(lba);
        self.touch(group);
        let v = self.resident[&group].entries[(lba % GROUP_ENTRIES as u64) as usize];
        (v != UNMAPPED).then_some(v)
    }

    /// Side-effect free view: `None` when the group is not resident.
    pub fn peek(&self, lba: u64) -> Option<Option<u32>> {
        self.resident.get(&group_of(lba)).map(|r| {
            let v = r.entries[(lba % GROUP_ENTRIES as u64) as usize];
            (v != UNMAPPED).then_some(v)
        })
    }

    /// Updates a resident entry. Panics if the group is not resident.
    pub fn set(&mut self, lba: u64, pba: u32) -> SetOutcome {
        let group = group_of(lba);
        self.touch(group);
        let mut out = SetOutcome::default();
        let r = self.resident.get_mut(&group).expect("group resident");
        let slot = &mut r.entries[(lba % GROUP_ENTRIES as u64) as usize];
        if *slot != UNMAPPED {
            out.old = Some(*slot);
        }
        *slot = pba;
        if !r.dirty {
            r.dirty = true;
            *self.generation.entry(group).or_insert(0) += 1;
            out.stale_mapping = self.directory.remove(&group);
        }
        out
    }

    pub fn pin(&mut self, group: u64) {
        *self.pins.entry(group).or_insert(0) += 1;
    }

    pub fn unpin(&mut self, group: u64) {
        let n = self.pins.get_mut(&group).expect("group pinned");
        *n -= 1;
        if *n == 0 {
            self.pins.remove(&group);
        }
    }

    pub fn is_pinned(&self, group: u64) -> bool {
        self.pins.contains_key(&group)
    }

    /// Evicts until at most `cap_groups` groups are resident or every
    /// resident group is pinned.
    pub fn evict_if_needed(&mut self) -> Vec<Writeback> {
        let mut out = Vec::new();
        while self.resident.len() > self.cap_groups {
            match self.clock_victim() {
                Some(group) => {
                    if let Some(w) = self.evict(group) {
                        out.push(w);
                    }
                }
                None => break,
            }
        }
        out
    }

    fn clock_victim(&mut self) -> Option<u64> {
        let n = self.frames.len();
        // Two sweeps suffice: the first clears every unpinned reference bit.
        for _ in 0..2 * n + 1 {
            let h = self.hand;
            self.hand = (self.hand + 1) % n;
            let Some(fr) = self.frames[h].as_mut() else {
                continue;
            };
            if self.pins.contains_key(&fr.group) {
                continue;
            }
            if fr.referenced {
                fr.referenced = false;
            } else {
                return Some(fr.group);
            }
        }
        None
    }

    fn evict(&mut self, group: u64) -> Option<Writeback> {
        let r = self.resident.remove(&group).expect("resident");
        self.frames[r.frame] = None;
        self.free_frames.push(r.frame);
        self.stats.evictions += 1;
        if !r.dirty || r.entries.iter().all(|&e| e == UNMAPPED) {
            return None;
        }
        let generation = self.generation.get(&group).copied().unwrap_or(0);
        let block = serialize_group(&r.entries);
        self.writeback.insert(group, (generation, r.entries));
        self.stats.writebacks += 1;
        Some(Writeback {
            group,
            generation,
            block,
        })
    }

    /// Records that the mapping block for (`group`, `generation`) is durable
    /// at `pba`. Returns `pba` back if a newer generation superseded it, so
    /// the caller can mark it stale.
    pub fn mapping_persisted(&mut self, group: u64, generation: u64, pba: u32) -> Option<u32> {
        match self.writeback.get(&group) {
            Some((g, _)) if *g == generation => {
                self.writeback.remove(&group);
                let current = self.generation.get(&group).copied().unwrap_or(0);
                if current == generation {
                    self.directory.insert(group, pba);
                    None
                } else {
                    Some(pba)
                }
            }
            _ => Some(pba),
        }
    }

    /// Moves the directory entry of `group` from `from` to `to` if it still
    /// points at `from`.
    pub fn relocate_mapping(&mut self, group: u64, from: u32, to: u32) -> bool {
        match self.directory.get_mut(&group) {
            Some(p) if *p == from => {
                *p = to;
                true
            }
            _ => false,
        }
    }

    /// Whether `pba` is the current mapping block of `group`.
    pub fn mapping_is_current(&self, group: u64, pba: u32) -> bool {
        self.directory.get(&group) == Some(&pba)
    }

    /// Rebuilt state after a crash: resident groups start dirty and
    /// unreferenced, the directory covers the rest.
    pub fn restore(
        logical_blocks: u64,
        cap_groups: usize,
        groups: impl IntoIterator<Item = (u64, Group)>,
        directory: HashMap<u64, u32>,
    ) -> Self {
        let mut ix = L2pIndex::new(logical_blocks, cap_groups);
        ix.directory = directory;
        let mut groups: Vec<(u64, Group)> = groups.into_iter().collect();
        groups.sort_by_key(|(g, _)| *g);
        for (g, entries) in groups {
            ix.make_resident(g, entries, true);
            ix.generation.insert(g, 1);
            let f = ix.resident[&g].frame;
            ix.frames[f].as_mut().expect("frame").referenced = false;
        }
        ix
    }

    /// Every mapped (lba, pba) pair reachable without device I/O, plus the
    /// groups only reachable through the directory.
    pub fn resident_entries(&self) -> Vec<(u64, u32)> {
        let mut out = Vec::new();
        let mut gs: Vec<&u64> = self.resident.keys().collect();
        gs.sort();
        for &g in gs {
            for (i, &e) in self.resident[&g].entries.iter().enumerate() {
                if e != UNMAPPED {
                    out.push((g * GROUP_ENTRIES as u64 + i as u64, e));
                }
            }
        }
        out
    }

    pub fn writeback_entries(&self, group: u64) -> Option<&Group> {
        self.writeback.get(&group).map(|(_, g)| g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resident_set(ix: &mut L2pIndex, lba: u64, pba: u32) -> SetOutcome {
        assert_eq!(ix.ensure(group_of(lba)), Ensure::Resident);
        ix.set(lba, pba)
    }

    #[test]
    fn update_then_lookup() {
        let mut ix = L2pIndex::new(1 << 20, 16);
        resident_set(&mut ix, 5, 77);
        assert_eq!(ix.get(5), Some(77));
        let o = resident_set(&mut ix, 5, 78);
        assert_eq!(o.old, Some(77));
        assert_eq!(ix.get(5), Some(78));
        assert_eq!(ix.get(6), None);
    }

    #[test]
    fn no_eviction_under_cap() {
        let mut ix = L2pIndex::new(1 << 20, 8);
        for g in 0..8 {
            resident_set(&mut ix, g * 1024, g as u32);
        }
        assert!(ix.evict_if_needed().is_empty());
        assert_eq!(ix.resident_groups(), 8);
    }

    #[test]
    fn clock_clears_bits_then_evicts_first() {
        let mut ix = L2pIndex::new(1 << 20, 3);
        for g in 0..4 {
            resident_set(&mut ix, g * 1024, 1);
        }
        // every reference bit is set; one sweep clears them, then frame 0 goes
        let wb = ix.evict_if_needed();
        assert_eq!(wb.len(), 1);
        assert_eq!(wb[0].group, 0);
        assert!(!ix.is_resident(0));
        assert_eq!(ix.hand(), 1);
    }

    #[test]
    fn clean_groups_are_dropped() {
        let mut ix = L2pIndex::new(1 << 20, 1);
        ix.ensure(0);
        ix.ensure(1);
        assert!(ix.evict_if_needed().is_empty());
        assert_eq!(ix.resident_groups(), 1);
    }

    #[test]
    fn writeback_then_fetch_path() {
        let mut ix = L2pIndex::new(1 << 20, 1);
        resident_set(&mut ix, 10, 500);
        resident_set(&mut ix, 2048, 600);
        let wb = ix.evict_if_needed();
        assert_eq!(wb.len(), 1);
        let w = &wb[0];
        assert_eq!(w.group, 0);
        // still in the writeback buffer: no I/O needed
        assert_eq!(ix.ensure(0), Ensure::Resident);
        assert_eq!(ix.get(10), Some(500));
        ix.evict_if_needed();
        assert_eq!(ix.mapping_persisted(0, w.generation, 9000), None);
        assert!(!ix.is_resident(0) || ix.directory_entry(0) == Some(9000));
        ix.ensure(2);
        ix.evict_if_needed();
        if !ix.is_resident(0) {
            assert_eq!(ix.ensure(0), Ensure::Fetch(9000));
            ix.install(0, parse_group(&w.block[..]));
            assert_eq!(ix.get(10), Some(500));
        }
    }

    #[test]
    fn dirtying_marks_old_mapping_stale() {
        let mut ix = L2pIndex::new(1 << 20, 1);
        resident_set(&mut ix, 1, 1);
        resident_set(&mut ix, 1024, 2);
        let w = ix.evict_if_needed().remove(0);
        ix.mapping_persisted(w.group, w.generation, 42);
        assert_eq!(ix.directory_entry(0), Some(42));
        ix.ensure(0);
        assert_eq!(ix.ensure(0), Ensure::Fetch(42));
        ix.install(0, parse_group(&w.block[..]));
        let o = ix.set(3, 9);
        assert_eq!(o.stale_mapping, Some(42));
        assert_eq!(ix.directory_entry(0), None);
    }

    #[test]
    fn superseded_writeback_is_stale() {
        let mut ix = L2pIndex::new(1 << 20, 1);
        resident_set(&mut ix, 1, 1);
        resident_set(&mut ix, 1024, 2);
        let w = ix.evict_if_needed().remove(0);
        // fault back from the buffer and modify before the block lands
        resident_set(&mut ix, 1, 3);
        assert_eq!(ix.mapping_persisted(0, w.generation, 77), Some(77));
        assert_eq!(ix.directory_entry(0), None);
    }

    #[test]
    fn pinned_groups_are_skipped() {
        let mut ix = L2pIndex::new(1 << 20, 1);
        resident_set(&mut ix, 1, 1);
        ix.pin(0);
        resident_set(&mut ix, 1024, 2);
        let wb = ix.evict_if_needed();
        assert_eq!(wb[0].group, 1);
        assert!(ix.is_resident(0));
        ix.unpin(0);
    }

    #[test]
    fn cap_bound_for_large_volume() {
        // 50 MiB of 4 KiB groups
        let cap = (50 << 20) / MAPPING_BLOCK_BYTES;
        assert_eq!(cap, 12_800);
        let ix = L2pIndex::new((200u64 << 30) / 4096, cap);
        assert_eq!(ix.total_groups(), 51_200);
    }

    #[test]
    fn mapping_block_round_trip() {
        let mut g = empty_group();
        g[0] = 7;
        g[1023] = 0xdead;
        assert_eq!(parse_group(&serialize_group(&g)[..]), g);
    }
}
