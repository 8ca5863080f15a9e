use std::collections::HashMap;

use proptest::prelude::*;
use raid_engine::{LayoutMode, Payload, Volume, VolumeConfig};
use zns_device::{page_from_slice, DeviceArray, DeviceGeometry, BLOCK_SIZE};

fn page(tag: u64) -> Payload {
    let mut b = [0u8; BLOCK_SIZE];
    b[..8].copy_from_slice(&tag.to_le_bytes());
    Some(page_from_slice(&b))
}

#[derive(Clone, Debug)]
enum Op {
    Write { lba: u64, n: u64 },
    Read { lba: u64 },
    Advance(u64),
}

fn ops(space: u64) -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            4 => (0..space, prop::sample::select(vec![1u64, 1, 2, 4, 8]))
                .prop_map(move |(lba, n)| Op::Write { lba: lba.min(space - n), n }),
            2 => (0..space).prop_map(|lba| Op::Read { lba }),
            1 => (1u64..400_000).prop_map(Op::Advance),
        ],
        1..250,
    )
}

fn config(layout: u8, cap: Option<usize>) -> VolumeConfig {
    VolumeConfig {
        layout: match layout {
            0 => LayoutMode::Hybrid,
            1 => LayoutMode::ZoneWriteOnly,
            _ => LayoutMode::ZoneAppendOnly,
        },
        n_small: 2,
        n_large: 1,
        group_size: 4,
        l2p_cap_groups: cap,
        logical_bytes: Some(3000 * BLOCK_SIZE as u64),
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Every acknowledged read returns the newest data acknowledged before
    // it was submitted, or data from a write still in flight.
    #[test]
    fn reads_agree_with_a_shadow_map(ops in ops(3000), layout in 0u8..3, capped in any::<bool>()) {
        let cfg = config(layout, capped.then_some(1));
        let array = DeviceArray::new(DeviceGeometry::default().with_zones(24, 256), 4).unwrap();
        let mut v = Volume::create(cfg, array).unwrap();
        let mut acked: HashMap<u64, u64> = HashMap::new();
        let mut writes: HashMap<u64, (u64, u64, u64)> = HashMap::new();
        let mut tag = 1;
        for op in &ops {
            match *op {
                Op::Write { lba, n } => {
                    let id = v.submit_write(lba, (0..n).map(|i| page(tag + i)).collect());
                    writes.insert(id, (lba, n, tag));
                    tag += n;
                }
                Op::Read { lba } => {
                    v.run_until_idle();
                    for c in v.take_completions() {
                        if let Some((l, n, t)) = writes.remove(&c.id) {
                            prop_assert!(c.error.is_none());
                            for i in 0..n {
                                let e = acked.entry(l + i).or_insert(0);
                                *e = (*e).max(t + i);
                            }
                        }
                    }
                    let c = v.read_sync(lba, 1);
                    match acked.get(&lba) {
                        Some(&t) => prop_assert_eq!(&c.data[0], &page(t)),
                        None => prop_assert!(c.error.is_some()),
                    }
                }
                Op::Advance(dt) => v.run_until(v.now() + dt),
            }
        }
        v.run_until_idle();
        for c in v.take_completions() {
            if let Some((l, n, t)) = writes.remove(&c.id) {
                prop_assert!(c.error.is_none());
                for i in 0..n {
                    let e = acked.entry(l + i).or_insert(0);
                    *e = (*e).max(t + i);
                }
            }
        }
        prop_assert!(writes.is_empty());
        for (&lba, &t) in &acked {
            let c = v.read_sync(lba, 1);
            prop_assert_eq!(&c.data[0], &page(t));
        }
        for s in v.validity().segments().collect::<Vec<_>>() {
            prop_assert_eq!(v.validity().recount(s), v.validity().valid(s));
        }
    }
}
