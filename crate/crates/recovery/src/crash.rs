//! Power-loss recovery.
//!
//! The durable image is scanned in three timed phases: segment headers,
//! then footers of sealed segments and out-of-band areas of open ones,
//! then the footer writes that finish segments whose data region filled
//! up just before the crash. The mapping table is rebuilt from block
//! metadata: the newest timestamp per LBA wins, and a persisted mapping
//! block replaces its group when it is at least as new as every entry
//! of that group.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use l2p_index::{Group, L2pIndex, GROUP_ENTRIES, UNMAPPED};
use raid_engine::{special_oob, Pba, RecoveredSegment, RecoveredState, Volume, VolumeConfig};
use segment_layout::{
    is_mapping_lba, mapping_group_of, parse_footer, parse_header, position_of_drive, serialize_footer, BlockKind,
    BlockMeta, CompactStripeTable, Oob, SegmentDescriptor, SegmentState, WriteMode, INVALID_LBA,
};
use serde::Serialize;
use zns_device::{DeviceArray, SimTime, StoredBlock, ZoneDescriptor, ZoneState, BLOCK_SIZE};

use crate::RecoveryError;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    /// Segments found with a header on every zone.
    pub segments_recovered: u64,
    /// Segments missing a header somewhere; their zones were reset.
    pub segments_discarded: u64,
    /// Sealed segments, including the ones sealed here.
    pub segments_sealed: u64,
    /// Open segments whose footer recovery wrote.
    pub segments_sealed_by_recovery: u64,
    /// Open segments that keep taking stripes.
    pub segments_resumed: u64,
    /// Open segments with gaps; their live blocks move elsewhere.
    pub segments_relocated: u64,
    pub partial_stripes_discarded: u64,
    pub l2p_entries: u64,
    /// Groups served by a persisted mapping block instead of memory.
    pub mapping_groups: u64,
    pub blocks_scanned: u64,
    /// Simulated time of the metadata scan.
    pub scan_ns: SimTime,
    /// Simulated time until the recovered volume went idle.
    pub elapsed_ns: SimTime,
}

/// Tracks the completion time of a batch of commands issued together.
struct PhaseClock {
    start: SimTime,
    end: SimTime,
}

impl PhaseClock {
    fn observe(&mut self, t: SimTime) {
        self.end = self.end.max(t);
    }

    fn next(&mut self) {
        self.start = self.end;
    }
}

/// Data block with its address, as found in a footer or an OOB area.
struct Located {
    drive: usize,
    offset: u32,
    meta: BlockMeta,
}

struct Scanned {
    desc: SegmentDescriptor,
    zones: Vec<ZoneDescriptor>,
    next_seq: u32,
    stripes: u64,
    blocks: Vec<Located>,
    cst: Option<CompactStripeTable>,
    footer_meta: Vec<Vec<BlockMeta>>,
    relocate: bool,
    /// Newest data timestamp anywhere in the segment, partial stripes
    /// included, so none is handed out twice.
    max_ts: u64,
}

fn corrupt(msg: String) -> RecoveryError {
    RecoveryError::UnrecoverableCorruption(msg)
}

/// Rebuilds a volume from the durable contents of `array`.
pub fn recover_crash(config: VolumeConfig, mut array: DeviceArray) -> Result<(Volume, RecoveryReport), RecoveryError> {
    let scheme = config.scheme;
    let n = scheme.width();
    if array.width() != n {
        return Err(corrupt(format!("array has {} drives, scheme needs {n}", array.width())));
    }
    if !array.failed_drives().is_empty() {
        return Err(RecoveryError::TooManyFailures);
    }
    let dev = array.geometry().clone();
    let mut report = RecoveryReport::default();
    let mut clock = PhaseClock { start: 0, end: 0 };

    // headers
    let mut found: BTreeMap<u32, (SegmentDescriptor, Vec<Option<ZoneDescriptor>>)> = BTreeMap::new();
    let mut next_segment_id = 0u32;
    for d in 0..n {
        let zones: Vec<ZoneDescriptor> = array.drive(d).zones().filter(|z| z.write_pointer > 0).collect();
        for z in zones {
            let rc = array.zone_read(clock.start, d, z.zone_id, 0, 1)?;
            clock.observe(rc.completes_at);
            report.blocks_scanned += 1;
            let desc = parse_header(&rc.blocks[0].bytes()[..])
                .map_err(|e| corrupt(format!("drive {d} zone {}: {e}", z.zone_id)))?;
            if desc.zone_ids.len() != n || desc.zone_ids[d] != z.zone_id {
                return Err(corrupt(format!(
                    "drive {d} zone {} holds a header of another zone",
                    z.zone_id
                )));
            }
            if desc.scheme != scheme {
                return Err(corrupt(format!(
                    "segment {} uses {:?}, volume uses {:?}",
                    desc.segment_id, desc.scheme, scheme
                )));
            }
            next_segment_id = next_segment_id.max(desc.segment_id + 1);
            let entry = found
                .entry(desc.segment_id)
                .or_insert_with(|| (desc.clone(), vec![None; n]));
            if entry.0 != desc {
                return Err(corrupt(format!("segment {} has differing headers", desc.segment_id)));
            }
            entry.1[d] = Some(z);
        }
    }
    clock.next();

    // a segment missing any header never took data: drop it
    let mut segments = Vec::new();
    for (desc, zones) in found.into_values() {
        if zones.iter().any(|z| z.is_none()) {
            for (d, z) in zones.iter().enumerate() {
                if let Some(z) = z {
                    array.zone_reset(d, z.zone_id)?;
                }
            }
            report.segments_discarded += 1;
            continue;
        }
        report.segments_recovered += 1;
        segments.push((desc, zones.into_iter().map(|z| z.expect("checked")).collect::<Vec<_>>()));
    }

    let mut scanned = Vec::new();
    let mut to_seal = Vec::new();
    for (desc, zones) in segments {
        let s = if zones.iter().all(|z| z.state == ZoneState::Full) {
            scan_sealed(&mut array, &mut clock, &mut report, desc, zones)?
        } else {
            scan_open(&mut array, &mut clock, &mut report, desc, zones)?
        };
        if !s.relocate && s.desc.state == SegmentState::Open && s.next_seq == s.desc.geometry.stripes {
            to_seal.push(scanned.len());
        }
        scanned.push(s);
    }
    clock.next();

    // footers of segments whose last stripe landed just before the crash
    for &i in &to_seal {
        let s = &mut scanned[i];
        let g = s.desc.geometry;
        for d in 0..n {
            let z = s.zones[d];
            if z.write_pointer == g.data_end() {
                let blocks: Vec<StoredBlock> = serialize_footer(&s.footer_meta[d])
                    .into_iter()
                    .map(|p| StoredBlock::new(Some(p), special_oob(BlockKind::Footer, s.desc.segment_id)))
                    .collect();
                let ev = array.zone_write(clock.start, d, z.zone_id, g.data_end(), blocks)?;
                clock.observe(ev.completes_at);
                array.complete(d, ev.command)?;
            }
        }
        for d in 0..n {
            array.zone_finish(d, s.zones[d].zone_id)?;
        }
        s.desc.state = SegmentState::Sealed;
        s.footer_meta = Vec::new();
        report.segments_sealed_by_recovery += 1;
    }
    for s in &scanned {
        if s.relocate {
            // read-only from here on; frees open-zone slots on the drives
            for (d, z) in s.zones.iter().enumerate() {
                if z.state == ZoneState::Open {
                    array.zone_finish(d, z.zone_id)?;
                }
            }
            report.segments_relocated += 1;
        } else if s.desc.state == SegmentState::Sealed {
            report.segments_sealed += 1;
        } else {
            report.segments_resumed += 1;
        }
    }
    let scan_end = clock.end;

    // mapping table
    let logical = config.logical_blocks(&dev);
    let pack = |drive: usize, zone: u32, offset: u32| {
        Pba { drive, zone, offset }.pack(dev.num_zones, dev.zone_capacity_blocks)
    };
    let mut entries: HashMap<u64, (u64, u32)> = HashMap::new();
    let mut mappings: HashMap<u64, (u64, u32)> = HashMap::new();
    let max_ts = scanned.iter().map(|s| s.max_ts).max().unwrap_or(0);
    for s in &scanned {
        for b in &s.blocks {
            if b.meta.lba == INVALID_LBA {
                continue;
            }
            let pba = pack(b.drive, s.desc.zone_ids[b.drive], b.offset);
            let cand = (b.meta.timestamp, pba);
            if is_mapping_lba(b.meta.lba) {
                let e = mappings.entry(mapping_group_of(b.meta.lba)).or_insert(cand);
                *e = (*e).max(cand);
            } else {
                let lba = b.meta.lba / BLOCK_SIZE as u64;
                if lba >= logical {
                    continue;
                }
                let e = entries.entry(lba).or_insert(cand);
                *e = (*e).max(cand);
            }
        }
    }
    let mut groups: BTreeMap<u64, (u64, Group)> = BTreeMap::new();
    for (&lba, &(ts, pba)) in &entries {
        let g = groups
            .entry(lba / GROUP_ENTRIES as u64)
            .or_insert_with(|| (0, Box::new([UNMAPPED; GROUP_ENTRIES])));
        g.0 = g.0.max(ts);
        g.1[(lba % GROUP_ENTRIES as u64) as usize] = pba;
    }
    let mut directory = HashMap::new();
    for (&group, &(ts, pba)) in &mappings {
        // pinned groups are never written back, so a mapping block at
        // least as new as every entry already holds all of them
        if groups.get(&group).is_some_and(|(newest, _)| ts >= *newest) {
            directory.insert(group, pba);
            groups.remove(&group);
        }
    }
    let mut live_pbas: Vec<u32> = entries.values().map(|&(_, p)| p).collect();
    live_pbas.extend(directory.values().copied());
    live_pbas.sort_unstable();
    report.l2p_entries = entries.len() as u64;
    report.mapping_groups = directory.len() as u64;
    let l2p = L2pIndex::restore(
        logical,
        config.l2p_cap(&dev),
        groups.into_iter().map(|(g, (_, e))| (g, e)),
        directory,
    );

    let state = RecoveredState {
        segments: scanned
            .into_iter()
            .map(|s| RecoveredSegment {
                written_blocks: s.stripes * (scheme.k as u64) * s.desc.chunk_blocks() as u64,
                descriptor: s.desc,
                next_seq: s.next_seq,
                cst: s.cst,
                footer_meta: s.footer_meta,
                relocate: s.relocate,
            })
            .collect(),
        l2p,
        live_pbas,
        next_timestamp: max_ts + 1,
        next_segment_id,
        now: scan_end,
    };
    let mut volume = Volume::restore(config, array, state)?;
    volume.run_until_idle();
    report.scan_ns = scan_end;
    report.elapsed_ns = volume.now();
    Ok((volume, report))
}

fn new_cst(desc: &SegmentDescriptor, n: usize) -> Option<CompactStripeTable> {
    (desc.mode == WriteMode::ZoneAppend && desc.group_size() > 1)
        .then(|| CompactStripeTable::new(n, &desc.geometry).expect("group size above one"))
}

fn scan_sealed(
    array: &mut DeviceArray,
    clock: &mut PhaseClock,
    report: &mut RecoveryReport,
    mut desc: SegmentDescriptor,
    zones: Vec<ZoneDescriptor>,
) -> Result<Scanned, RecoveryError> {
    let g = desc.geometry;
    let scheme = desc.scheme;
    let n = zones.len();
    let c = g.chunk_blocks;
    let mut cst = new_cst(&desc, n);
    let mut blocks = Vec::new();
    for (d, z) in zones.iter().enumerate() {
        let rc = array.zone_read(clock.start, d, z.zone_id, g.data_end(), g.footer_blocks)?;
        clock.observe(rc.completes_at);
        report.blocks_scanned += g.footer_blocks as u64;
        let pages: Vec<&[u8]> = rc.blocks.iter().map(|b| &b.bytes()[..]).collect();
        let metas = parse_footer(&pages, g.data_blocks() as usize)
            .map_err(|e| corrupt(format!("segment {} drive {d}: {e}", desc.segment_id)))?;
        for (i, meta) in metas.into_iter().enumerate() {
            let slot = i as u32 / c;
            if let Some(cst) = cst.as_mut() {
                if (i as u32).is_multiple_of(c) {
                    cst.set(d, slot, meta.stripe_id % g.group_size)?;
                }
            }
            if position_of_drive(&scheme, meta.stripe_id, d) < scheme.k {
                blocks.push(Located {
                    drive: d,
                    offset: g.data_start() + i as u32,
                    meta,
                });
            }
        }
    }
    desc.state = SegmentState::Sealed;
    Ok(Scanned {
        max_ts: blocks.iter().map(|b| b.meta.timestamp).max().unwrap_or(0),
        next_seq: g.stripes,
        stripes: g.stripes as u64,
        footer_meta: Vec::new(),
        relocate: false,
        cst,
        blocks,
        desc,
        zones,
    })
}

/// One chunk of an open segment, if its rows agree on a stripe.
fn chunk_stripe(desc: &SegmentDescriptor, drive: usize, slot: u32, rows: &[Option<Oob>]) -> Option<u32> {
    let g = desc.geometry;
    let first = rows.first().copied().flatten()?;
    let seq = first.meta.stripe_id;
    let ok = rows.iter().all(|r| {
        r.is_some_and(|o| {
            o.segment_id == desc.segment_id
                && o.meta.stripe_id == seq
                && o.position == first.position
                && matches!(o.kind, BlockKind::Data | BlockKind::Parity)
        })
    }) && seq < g.stripes
        && first.position as usize == position_of_drive(&desc.scheme, seq, drive)
        && match desc.mode {
            WriteMode::ZoneWrite => slot == seq,
            WriteMode::ZoneAppend => g.group_of_seq(seq) == slot / g.group_size,
        };
    ok.then_some(seq)
}

fn scan_open(
    array: &mut DeviceArray,
    clock: &mut PhaseClock,
    report: &mut RecoveryReport,
    desc: SegmentDescriptor,
    zones: Vec<ZoneDescriptor>,
) -> Result<Scanned, RecoveryError> {
    let g = desc.geometry;
    let scheme = desc.scheme;
    let n = zones.len();
    let c = g.chunk_blocks;
    let mut oobs: Vec<Vec<Option<Oob>>> = Vec::with_capacity(n);
    let mut metas: Vec<Vec<BlockMeta>> = Vec::with_capacity(n);
    let mut holes = false;
    let mut seen = BTreeSet::new();
    let mut max_ts = 0;
    for (d, z) in zones.iter().enumerate() {
        let hi = z.write_pointer.min(g.data_end());
        let len = hi.saturating_sub(g.data_start());
        let mut col = Vec::with_capacity(len as usize);
        let mut mcol = Vec::with_capacity(len as usize);
        if len > 0 {
            let rc = array.zone_read(clock.start, d, z.zone_id, g.data_start(), len)?;
            clock.observe(rc.completes_at);
            report.blocks_scanned += len as u64;
            for b in &rc.blocks {
                // a block whose OOB fails its checksum counts as missing
                let o = Oob::decode(&b.oob).ok().flatten();
                holes |= o.is_none();
                if let Some(o) = o {
                    seen.insert(o.meta.stripe_id);
                    if o.kind == BlockKind::Data {
                        max_ts = max_ts.max(o.meta.timestamp);
                    }
                    mcol.push(o.meta);
                } else {
                    mcol.push(BlockMeta::default());
                }
                col.push(o);
            }
        }
        oobs.push(col);
        metas.push(mcol);
    }

    let mut chunks: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
    let mut stray = false;
    for (d, col) in oobs.iter().enumerate() {
        for (slot, rows) in col.chunks(c as usize).enumerate() {
            match chunk_stripe(&desc, d, slot as u32, rows) {
                Some(seq) if rows.len() == c as usize => chunks.entry(seq).or_default().push((d, slot as u32)),
                _ => stray = true,
            }
        }
    }
    let complete: Vec<u32> = chunks
        .iter()
        .filter(|(_, v)| {
            let drives: BTreeSet<usize> = v.iter().map(|&(d, _)| d).collect();
            v.len() == n && drives.len() == n
        })
        .map(|(&s, _)| s)
        .collect();
    let done: BTreeSet<u32> = complete.iter().copied().collect();
    let partial = seen.iter().filter(|s| !done.contains(s)).count() as u64;
    report.partial_stripes_discarded += partial;

    let levels: BTreeSet<u32> = zones.iter().map(|z| z.write_pointer.min(g.data_end())).collect();
    let m = complete.len() as u32;
    let contiguous = complete.iter().copied().eq(0..m);
    let clean = levels.len() == 1 && !holes && !stray && partial == 0 && contiguous;

    let mut cst = new_cst(&desc, n);
    let mut blocks = Vec::new();
    for &seq in &complete {
        for &(d, slot) in &chunks[&seq] {
            if let Some(cst) = cst.as_mut() {
                cst.set(d, slot, seq % g.group_size)?;
            }
            if position_of_drive(&scheme, seq, d) < scheme.k {
                for r in 0..c {
                    let i = (slot * c + r) as usize;
                    blocks.push(Located {
                        drive: d,
                        offset: g.data_start() + i as u32,
                        meta: metas[d][i],
                    });
                }
            }
        }
    }
    Ok(Scanned {
        max_ts,
        next_seq: m,
        stripes: m as u64,
        footer_meta: if clean { metas } else { Vec::new() },
        relocate: !clean,
        cst,
        blocks,
        desc,
        zones,
    })
}
