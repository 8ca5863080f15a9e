//! Stripe-level encoding helpers shared by the write path, degraded reads
//! and drive rebuild.

use erasure_codec::{encode, reconstruct, reconstruct_lane, RaidScheme};
use segment_layout::{BlockKind, BlockMeta, Oob, INVALID_LBA};
use zns_device::{page_from_slice, StoredBlock, OOB_SIZE};

use crate::{EngineError, Payload};

pub fn build_oob(meta: BlockMeta, kind: BlockKind, position: usize, segment_id: u32) -> [u8; OOB_SIZE] {
    Oob {
        meta,
        kind,
        position: position as u8,
        segment_id,
    }
    .encode()
}

/// OOB of header and footer blocks: identical on every zone of a segment.
pub fn special_oob(kind: BlockKind, segment_id: u32) -> [u8; OOB_SIZE] {
    build_oob(BlockMeta::new(INVALID_LBA, 0, u32::MAX), kind, 0, segment_id)
}

/// Parity payloads for one row of a stripe. All-zero rows stay sparse.
pub(crate) fn encode_row(scheme: &RaidScheme, row: &[&Payload]) -> Vec<Payload> {
    if row.iter().all(|p| p.is_none()) {
        return vec![None; scheme.m];
    }
    let zero = zns_device::ZERO_PAGE;
    let data: Vec<&[u8]> = row.iter().map(|p| p.as_ref().map_or(&zero[..], |b| &b[..])).collect();
    encode(scheme, &data)
        .expect("equal chunk sizes")
        .into_iter()
        .map(|v| {
            StoredBlock::new(Some(page_from_slice(&v)), [0; OOB_SIZE])
                .compact()
                .payload
        })
        .collect()
}

/// Rebuilds the block at stripe position `wanted` from survivors of the
/// same row, including its out-of-band area.
pub fn reconstruct_block(
    scheme: &RaidScheme,
    wanted: usize,
    survivors: &[(usize, &StoredBlock)],
) -> Result<StoredBlock, EngineError> {
    let alive: Vec<usize> = survivors.iter().map(|(p, _)| *p).collect();
    let pick = scheme.choose_survivors(&alive).ok_or(EngineError::TooManyFailures)?;
    let chosen: Vec<(usize, &StoredBlock)> = pick
        .iter()
        .map(|p| *survivors.iter().find(|(q, _)| q == p).expect("picked from alive"))
        .collect();
    let mut oobs = Vec::with_capacity(chosen.len());
    for (p, b) in &chosen {
        let o = Oob::decode(&b.oob)?.ok_or(EngineError::Layout(segment_layout::LayoutError::CorruptOob))?;
        oobs.push((*p, o));
    }
    let payload = if chosen.iter().all(|(_, b)| b.payload.is_none()) {
        None
    } else {
        let avail: Vec<(usize, &[u8])> = chosen.iter().map(|(p, b)| (*p, &b.bytes()[..])).collect();
        let v = reconstruct(scheme, &avail, wanted)?;
        Some(page_from_slice(&v))
    };
    let lane = |f: fn(&Oob) -> u64| -> Result<u64, EngineError> {
        let vals: Vec<(usize, u64)> = oobs.iter().map(|(p, o)| (*p, f(o))).collect();
        Ok(reconstruct_lane(scheme, &vals, wanted)?)
    };
    let lba = lane(|o| o.meta.lba)?;
    let ts = lane(|o| o.meta.timestamp)?;
    let first = oobs[0].1;
    let kind = if wanted < scheme.k {
        BlockKind::Data
    } else {
        BlockKind::Parity
    };
    let oob = build_oob(
        BlockMeta::new(lba, ts, first.meta.stripe_id),
        kind,
        wanted,
        first.segment_id,
    );
    Ok(StoredBlock::new(payload, oob).compact())
}

#[cfg(test)]
mod tests {
    use super::*;
    use erasure_codec::{encode_lane, RaidKind};
    use zns_device::BLOCK_SIZE;

    #[test]
    fn rebuilds_payload_and_oob() {
        let scheme = RaidScheme::four_drive(RaidKind::Raid6);
        let data: Vec<Payload> = vec![Some(page_from_slice(&[3u8; BLOCK_SIZE])), None];
        let refs: Vec<&Payload> = data.iter().collect();
        let parity = encode_row(&scheme, &refs);
        let lbas = [4096u64, INVALID_LBA];
        let tss = [10u64, 11];
        let pl = encode_lane(&scheme, &lbas);
        let pt = encode_lane(&scheme, &tss);
        let mut blocks = Vec::new();
        for p in 0..4 {
            let (payload, lba, ts, kind) = if p < 2 {
                (data[p].clone(), lbas[p], tss[p], BlockKind::Data)
            } else {
                (parity[p - 2].clone(), pl[p - 2], pt[p - 2], BlockKind::Parity)
            };
            let oob = build_oob(BlockMeta::new(lba, ts, 7), kind, p, 2);
            blocks.push(StoredBlock::new(payload, oob).compact());
        }
        for lost in 0..4 {
            let surv: Vec<(usize, &StoredBlock)> = (0..4).filter(|&p| p != lost).map(|p| (p, &blocks[p])).collect();
            assert_eq!(reconstruct_block(&scheme, lost, &surv).unwrap(), blocks[lost]);
        }
        let two: Vec<(usize, &StoredBlock)> = vec![(2, &blocks[2]), (3, &blocks[3])];
        assert_eq!(reconstruct_block(&scheme, 0, &two).unwrap(), blocks[0]);
    }
}
