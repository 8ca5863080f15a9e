//! Rebuilding replaced drives.
//!
//! Every segment zone of a lost drive is regenerated from the survivors
//! and rewritten in place with Zone Write, one zone at a time. Reads for
//! the next chunk overlap the write of the current one.

use std::collections::BTreeSet;

use raid_engine::{reconstruct_block, special_oob, Phase, Volume};
use segment_layout::{
    position_of_drive, serialize_footer, serialize_header, BlockKind, BlockMeta, CompactStripeTable, Oob,
    SegmentDescriptor,
};
use serde::Serialize;
use zns_device::{SimTime, StoredBlock};

use crate::RecoveryError;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RebuildReport {
    pub zones_rebuilt: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
    pub elapsed_ns: SimTime,
}

struct Plan {
    desc: SegmentDescriptor,
    sealed: bool,
    stripes: u32,
    cst: Option<CompactStripeTable>,
}

/// Swaps in blank drives for `drives` and regenerates their contents.
/// The volume must be idle; its clock advances by the rebuild time.
pub fn rebuild_drives(volume: &mut Volume, drives: &[usize]) -> Result<RebuildReport, RecoveryError> {
    if !volume.is_idle() {
        return Err(RecoveryError::Busy);
    }
    let scheme = volume.scheme();
    let n = scheme.width();
    let lost: BTreeSet<usize> = drives.iter().copied().collect();
    if lost.is_empty() {
        return Ok(RebuildReport::default());
    }
    if lost.iter().any(|&d| d >= n) {
        return Err(RecoveryError::Device(zns_device::DeviceError::NoSuchDrive(
            *lost.last().expect("non-empty"),
        )));
    }
    let mut down = lost.clone();
    down.extend(volume.array().failed_drives());
    // rotation repeats every `n` stripes
    for seq in 0..n as u32 {
        let positions: Vec<usize> = down.iter().map(|&d| position_of_drive(&scheme, seq, d)).collect();
        if !scheme.tolerates(&positions) {
            return Err(RecoveryError::TooManyFailures);
        }
    }
    let alive: Vec<usize> = (0..n).filter(|d| !down.contains(d)).collect();

    let plans: Vec<Plan> = volume
        .segment_views()
        .into_iter()
        .map(|v| Plan {
            desc: v.descriptor.clone(),
            sealed: v.phase == Phase::Sealed,
            stripes: v.next_seq,
            cst: v.cst.cloned(),
        })
        .collect();
    for &d in &lost {
        volume.array_mut().replace_drive(d)?;
    }

    let start = volume.now();
    let mut report = RebuildReport::default();
    let mut t = start;
    for plan in &plans {
        for &d in &lost {
            t = rebuild_zone(volume, plan, d, &alive, t, &mut report)?;
            report.zones_rebuilt += 1;
        }
    }
    volume.run_until(t);
    report.elapsed_ns = t - start;
    Ok(report)
}

fn rebuild_zone(
    volume: &mut Volume,
    plan: &Plan,
    drive: usize,
    alive: &[usize],
    start: SimTime,
    report: &mut RebuildReport,
) -> Result<SimTime, RecoveryError> {
    let scheme = volume.scheme();
    let desc = &plan.desc;
    let g = desc.geometry;
    let c = g.chunk_blocks;
    let zone = desc.zone_ids[drive];
    let id = desc.segment_id;
    let array = volume.array_mut();

    let header: Vec<StoredBlock> = serialize_header(desc)
        .into_iter()
        .map(|p| StoredBlock::new(Some(p), special_oob(BlockKind::Header, id)).compact())
        .collect();
    report.blocks_written += header.len() as u64;
    let ev = array.zone_write(start, drive, zone, 0, header)?;
    array.complete(drive, ev.command)?;
    // `write_free` is when the zone accepts the next write, `issue` is when
    // the previous write went out, which is when the next reads may start
    let mut write_free = ev.completes_at;
    let mut issue = start;
    let mut metas: Vec<BlockMeta> = Vec::with_capacity(g.data_blocks() as usize);

    for slot in 0..plan.stripes {
        let (seq, sources) = match &plan.cst {
            None => (slot, alive.iter().map(|&a| (a, slot)).collect::<Vec<_>>()),
            Some(cst) => {
                let sid = cst.lookup(drive, slot).ok_or_else(|| {
                    RecoveryError::UnrecoverableCorruption(format!(
                        "segment {id}: no stripe table entry for drive {drive} slot {slot}"
                    ))
                })?;
                let group = slot / g.group_size;
                let found = cst.scan(g.group_slots(group), alive, sid).found;
                (group * g.group_size + sid, found)
            }
        };
        let positions: Vec<usize> = sources
            .iter()
            .map(|&(a, _)| position_of_drive(&scheme, seq, a))
            .collect();
        let pick = scheme
            .choose_survivors(&positions)
            .ok_or(RecoveryError::TooManyFailures)?;
        let mut chunks = Vec::with_capacity(pick.len());
        let mut ready = issue;
        for pos in pick {
            let (a, s) = sources[positions.iter().position(|&q| q == pos).expect("picked")];
            let rc = array.zone_read(issue, a, desc.zone_ids[a], g.slot_offset(s), c)?;
            ready = ready.max(rc.completes_at);
            report.blocks_read += c as u64;
            chunks.push((pos, rc.blocks));
        }
        let wanted = position_of_drive(&scheme, seq, drive);
        let mut out = Vec::with_capacity(c as usize);
        for r in 0..c as usize {
            let row: Vec<(usize, &StoredBlock)> = chunks.iter().map(|(p, b)| (*p, &b[r])).collect();
            let b = reconstruct_block(&scheme, wanted, &row)?;
            let o = Oob::decode(&b.oob)?.ok_or(segment_layout::LayoutError::CorruptOob)?;
            metas.push(o.meta);
            out.push(b);
        }
        report.blocks_written += c as u64;
        let at = ready.max(write_free);
        let ev = array.zone_write(at, drive, zone, g.slot_offset(slot), out)?;
        array.complete(drive, ev.command)?;
        issue = at;
        write_free = ev.completes_at;
    }

    if plan.sealed {
        let footer: Vec<StoredBlock> = serialize_footer(&metas)
            .into_iter()
            .map(|p| StoredBlock::new(Some(p), special_oob(BlockKind::Footer, id)))
            .collect();
        report.blocks_written += footer.len() as u64;
        let ev = array.zone_write(write_free, drive, zone, g.data_end(), footer)?;
        array.complete(drive, ev.command)?;
        write_free = ev.completes_at;
        array.zone_finish(drive, zone)?;
    }
    Ok(write_free)
}
