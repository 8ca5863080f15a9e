mod common;

use common::*;
use erasure_codec::RaidKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recovery::{recover_crash, RecoveryError};
use segment_layout::{serialize_header, SegmentDescriptor};
use zns_device::{DeviceArray, StoredBlock};

#[test]
fn clean_shutdown_keeps_everything() {
    let cfg = config(RaidKind::Raid5, 600);
    let mut v = fresh(&cfg, device(20, 128));
    let ops = workload(1, 300, 600);
    let acked = run_writes(&mut v, &ops, 8);
    assert_eq!(acked.len(), ops.len());
    v.run_until_idle();
    let image = v.array().crash_image();
    let (mut r, report) = recover_crash(cfg, image).unwrap();
    assert_eq!(report.segments_discarded, 0);
    assert_eq!(report.partial_stripes_discarded, 0);
    assert!(report.segments_sealed > 0, "{report:?}");
    verify(&mut r, &ops, &acked).unwrap();
}

#[test]
fn acked_writes_survive_every_crash_point() {
    for kind in [RaidKind::Raid5, RaidKind::Raid6] {
        let cfg = config(kind, 300);
        let ops = workload(2, 64, 300);
        let mut dry = fresh(&cfg, device(40, 32));
        run_writes(&mut dry, &ops, 4);
        dry.run_until_idle();
        let total = dry.array().mutations();
        assert!(total > 64);
        let mut seen = recovery::RecoveryReport::default();
        for n in 1..=total {
            let mut v = fresh(&cfg, device(40, 32));
            v.array_mut().arm_crash(n);
            let acked = run_writes(&mut v, &ops, 4);
            v.run_until_idle();
            let image = v.array_mut().take_crash_image().expect("crash point reached");
            let (mut r, report) =
                recover_crash(cfg.clone(), image).unwrap_or_else(|e| panic!("{kind:?} crash at {n}: {e}"));
            verify(&mut r, &ops, &acked).unwrap_or_else(|e| panic!("{kind:?} crash at {n}: {e}"));
            seen.segments_discarded += report.segments_discarded;
            seen.segments_relocated += report.segments_relocated;
            seen.segments_resumed += report.segments_resumed;
            seen.segments_sealed_by_recovery += report.segments_sealed_by_recovery;
            seen.partial_stripes_discarded += report.partial_stripes_discarded;
        }
        // the sweep reaches every recovery path
        assert!(seen.segments_discarded > 0, "{seen:?}");
        assert!(seen.segments_relocated > 0, "{seen:?}");
        assert!(seen.segments_resumed > 0, "{seen:?}");
        assert!(seen.segments_sealed_by_recovery > 0, "{seen:?}");
        assert!(seen.partial_stripes_discarded > 0, "{seen:?}");
    }
}

#[test]
fn acked_writes_survive_crashes_during_cleaning() {
    let cfg = config(RaidKind::Raid5, 300);
    let geom = device(14, 64);
    let ops = workload(3, 900, 300);
    let mut dry = fresh(&cfg, geom.clone());
    run_writes(&mut dry, &ops, 8);
    dry.run_until_idle();
    assert!(dry.stats().gc.runs > 0, "workload must trigger cleaning");
    let total = dry.array().mutations();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..40 {
        let n = rng.random_range(total / 2..=total);
        let mut v = fresh(&cfg, geom.clone());
        v.array_mut().arm_crash(n);
        let acked = run_writes(&mut v, &ops, 8);
        v.run_until_idle();
        let image = v.array_mut().take_crash_image().unwrap();
        let (mut r, _) = recover_crash(cfg.clone(), image).unwrap();
        verify(&mut r, &ops, &acked).unwrap_or_else(|e| panic!("crash at {n}: {e}"));
        // and the recovered volume keeps working
        let more = run_writes(&mut r, &ops[..50], 8);
        assert_eq!(more.len(), 50);
    }
}

#[test]
fn recovery_is_idempotent() {
    let mut cfg = config(RaidKind::Raid6, 400);
    cfg.l2p_cap_groups = None;
    let geom = device(20, 64);
    let ops = workload(5, 200, 400);
    for n in [40u64, 150, 333] {
        let mut v = fresh(&cfg, geom.clone());
        v.array_mut().arm_crash(n);
        let acked = run_writes(&mut v, &ops, 4);
        v.run_until_idle();
        let image = v.array_mut().take_crash_image().unwrap();
        let (mut once, _) = recover_crash(cfg.clone(), image).unwrap();
        let first = once.array().crash_image();
        let (mut twice, report) = recover_crash(cfg.clone(), first.clone()).unwrap();
        assert_eq!(report.segments_relocated, 0, "{report:?}");
        assert_eq!(report.partial_stripes_discarded, 0);
        for d in 0..first.width() {
            for z in 0..geom.num_zones {
                assert!(
                    first.drive(d).zone_image_eq(twice.array().drive(d), z),
                    "crash at {n}: drive {d} zone {z} changed"
                );
            }
        }
        for lba in 0..400 {
            assert_eq!(once.read_sync(lba, 1).data, twice.read_sync(lba, 1).data);
        }
        verify(&mut twice, &ops, &acked).unwrap();
    }
}

#[test]
fn bounded_index_recovers_through_mapping_blocks() {
    let mut cfg = config(RaidKind::Raid5, 4096);
    cfg.l2p_cap_groups = Some(1);
    let mut v = fresh(&cfg, device(24, 128));
    let ops: Vec<WriteOp> = (0..4u64)
        .flat_map(|g| {
            (0..20).map(move |i| WriteOp {
                lba: g * 1024 + i,
                n: 1,
                tag: 1 + g * 100 + i,
            })
        })
        .collect();
    let acked = run_writes(&mut v, &ops, 4);
    v.run_until_idle();
    assert!(v.stats().mapping_blocks > 0);
    let (mut r, report) = recover_crash(cfg, v.array().crash_image()).unwrap();
    assert!(report.mapping_groups > 0, "{report:?}");
    verify(&mut r, &ops, &acked).unwrap();
}

fn segment_zone_of(array: &DeviceArray, drive: usize) -> Option<(u32, SegmentDescriptor)> {
    array.drive(drive).zones().find(|z| z.write_pointer > 0).map(|z| {
        let b = array.drive(drive).peek(z.zone_id, 0).unwrap();
        (z.zone_id, segment_layout::parse_header(&b.bytes()[..]).unwrap())
    })
}

#[test]
fn segment_missing_a_header_is_discarded() {
    let cfg = config(RaidKind::Raid5, 300);
    let v = fresh(&cfg, device(20, 64));
    // header writes of the first segments are still in flight
    let mut image = v.array().crash_image();
    let mut opened = fresh(&cfg, device(20, 64));
    opened.run_until_idle();
    let (zone, desc) = segment_zone_of(opened.array(), 0).unwrap();
    // persist the header on one drive only
    let blocks: Vec<StoredBlock> = serialize_header(&desc)
        .into_iter()
        .map(|p| {
            StoredBlock::new(
                Some(p),
                raid_engine::special_oob(segment_layout::BlockKind::Header, desc.segment_id),
            )
        })
        .collect();
    let ev = image.zone_write(0, 0, zone, 0, blocks).unwrap();
    image.complete(0, ev.command).unwrap();
    let (r, report) = recover_crash(cfg, image).unwrap();
    assert_eq!(report.segments_discarded, 1);
    assert!(r.segment(desc.segment_id).is_none());
}

#[test]
fn partial_stripe_is_discarded() {
    let cfg = config(RaidKind::Raid5, 300);
    let mut v = fresh(&cfg, device(20, 64));
    v.run_until_idle();
    let base = v.array().mutations();
    // one chunk of the stripe reaches the media, the rest do not
    v.array_mut().arm_crash(1);
    let acked = run_writes(&mut v, &[WriteOp { lba: 7, n: 1, tag: 9 }], 1);
    assert!(acked.is_empty());
    v.run_until_idle();
    assert!(v.array().mutations() > base + 1);
    let image = v.array_mut().take_crash_image().unwrap();
    let (mut r, report) = recover_crash(cfg, image).unwrap();
    assert_eq!(report.partial_stripes_discarded, 1, "{report:?}");
    assert_eq!(report.segments_relocated, 1);
    assert!(r.read_sync(7, 1).error.is_some());
}

#[test]
fn garbage_header_is_unrecoverable() {
    let cfg = config(RaidKind::Raid5, 300);
    let mut v = fresh(&cfg, device(20, 64));
    v.run_until_idle();
    let mut image = v.array().crash_image();
    let z = image.drive(1).zones().find(|z| z.write_pointer == 0).unwrap().zone_id;
    let ev = image
        .zone_write(
            0,
            1,
            z,
            0,
            vec![StoredBlock::new(
                Some(zns_device::page_from_slice(&[7u8; 4096])),
                [0; 64],
            )],
        )
        .unwrap();
    image.complete(1, ev.command).unwrap();
    assert!(matches!(
        recover_crash(cfg, image),
        Err(RecoveryError::UnrecoverableCorruption(_))
    ));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    // Whatever the crash point, acknowledged data survives and a second
    // recovery changes nothing it can read.
    #[test]
    fn random_crash_points(seed in 0u64..1000, frac in 0.0f64..1.0, raid6 in proptest::bool::ANY, qd in 1usize..12) {
        let kind = if raid6 { RaidKind::Raid6 } else { RaidKind::Raid5 };
        let cfg = config(kind, 250);
        let ops = workload(seed, 150, 250);
        let mut dry = fresh(&cfg, device(30, 32));
        run_writes(&mut dry, &ops, qd);
        dry.run_until_idle();
        let n = 1 + (frac * dry.array().mutations() as f64) as u64;
        let mut v = fresh(&cfg, device(30, 32));
        v.array_mut().arm_crash(n);
        let acked = run_writes(&mut v, &ops, qd);
        v.run_until_idle();
        let (mut r, _) = recover_crash(cfg.clone(), v.array_mut().take_crash_image().unwrap()).unwrap();
        proptest::prop_assert!(verify(&mut r, &ops, &acked).is_ok());
        let (mut again, _) = recover_crash(cfg, r.array().crash_image()).unwrap();
        for lba in 0..250 {
            proptest::prop_assert_eq!(r.read_sync(lba, 1).data, again.read_sync(lba, 1).data);
        }
    }
}
