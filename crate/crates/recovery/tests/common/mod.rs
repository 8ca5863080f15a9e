#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use erasure_codec::{RaidKind, RaidScheme};
use raid_engine::{LayoutMode, Payload, Volume, VolumeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zns_device::{page_from_slice, DeviceArray, DeviceGeometry, BLOCK_SIZE};

pub fn page(tag: u64) -> Payload {
    let mut b = [0u8; BLOCK_SIZE];
    b[..8].copy_from_slice(&tag.to_le_bytes());
    b[BLOCK_SIZE - 8..].copy_from_slice(&(!tag).to_le_bytes());
    Some(page_from_slice(&b))
}

pub fn config(kind: RaidKind, logical_blocks: u64) -> VolumeConfig {
    VolumeConfig {
        scheme: RaidScheme::four_drive(kind),
        n_small: 2,
        n_large: 1,
        group_size: 4,
        layout: LayoutMode::Hybrid,
        logical_bytes: Some(logical_blocks * BLOCK_SIZE as u64),
        ..Default::default()
    }
}

pub fn device(zones: u32, cap: u32) -> DeviceGeometry {
    DeviceGeometry::default().with_zones(zones, cap)
}

pub fn fresh(config: &VolumeConfig, geom: DeviceGeometry) -> Volume {
    let array = DeviceArray::new(geom, config.scheme.width()).unwrap();
    Volume::create(config.clone(), array).unwrap()
}

/// A write of `n` blocks at `lba`; block `i` carries tag `tag + i`.
#[derive(Clone, Copy, Debug)]
pub struct WriteOp {
    pub lba: u64,
    pub n: u64,
    pub tag: u64,
}

pub fn workload(seed: u64, count: usize, space: u64) -> Vec<WriteOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tag = 1;
    (0..count)
        .map(|_| {
            let n = [1u64, 1, 2, 4][rng.random_range(0..4)];
            let lba = rng.random_range(0..space - n);
            let op = WriteOp { lba, n, tag };
            tag += n;
            op
        })
        .collect()
}

/// Runs `ops` at queue depth `qd` until done or until the armed crash
/// trips. Returns the indices of writes acknowledged before the crash.
pub fn run_writes(v: &mut Volume, ops: &[WriteOp], qd: usize) -> Vec<usize> {
    let mut ids = HashMap::new();
    let mut acked = Vec::new();
    let mut next = 0;
    loop {
        while ids.len() < qd && next < ops.len() && !v.array().crash_tripped() {
            let op = ops[next];
            let id = v.submit_write(op.lba, (0..op.n).map(|i| page(op.tag + i)).collect());
            ids.insert(id, next);
            next += 1;
        }
        if v.array().crash_tripped() || (ids.is_empty() && next == ops.len()) {
            break;
        }
        if !v.step() {
            break;
        }
        // one device completion per step, so acks here were durable before
        // any crash this step tripped
        for c in v.take_completions() {
            if let Some(i) = ids.remove(&c.id) {
                assert!(c.error.is_none(), "write failed: {:?}", c.error);
                acked.push(i);
            }
        }
    }
    acked
}

/// Checks that every LBA holds its newest acknowledged data or data from a
/// write submitted after it.
pub fn verify(v: &mut Volume, ops: &[WriteOp], acked: &[usize]) -> Result<usize, String> {
    let mut newest: BTreeMap<u64, usize> = BTreeMap::new();
    for &i in acked {
        let op = ops[i];
        for b in op.lba..op.lba + op.n {
            let e = newest.entry(b).or_insert(i);
            *e = (*e).max(i);
        }
    }
    for (&lba, &first) in &newest {
        let allowed: Vec<Payload> = ops[first..]
            .iter()
            .filter(|op| (op.lba..op.lba + op.n).contains(&lba))
            .map(|op| page(op.tag + lba - op.lba))
            .collect();
        let c = v.read_sync(lba, 1);
        if let Some(e) = c.error {
            return Err(format!("lba {lba}: {e}"));
        }
        if !allowed.contains(&c.data[0]) {
            return Err(format!("lba {lba}: stale or foreign data"));
        }
    }
    Ok(newest.len())
}
