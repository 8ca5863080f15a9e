use proptest::prelude::*;
use workload_harness::trace::{parse_trace, write_trace, TraceRecord};
use workload_harness::workload::{parse_bytes, Generator, Op, Pattern, SizeClass, WorkloadSpec};

fn pattern() -> impl Strategy<Value = Pattern> {
    prop_oneof![Just(Pattern::Random), Just(Pattern::Sequential), Just(Pattern::Zipf)]
}

proptest! {
    #[test]
    fn requests_stay_inside_the_volume(
        pattern in pattern(),
        blocks in prop::collection::vec(1u32..=8, 1..4),
        logical in 64u64..5000,
        read_fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let w = 1.0 / blocks.len() as f64;
        let sizes: Vec<SizeClass> = blocks.iter().map(|&b| SizeClass { bytes: b * 4096, weight: w }).collect();
        let spec = WorkloadSpec { pattern, sizes, read_fraction, total_bytes: 1 << 20, seed, ..Default::default() };
        let reqs: Vec<_> = Generator::new(&spec, logical).unwrap().collect();
        let issued: u64 = reqs.iter().map(|r| r.blocks as u64 * 4096).sum();
        prop_assert!(issued >= 1 << 20);
        for r in &reqs {
            prop_assert!(blocks.contains(&r.blocks));
            if pattern != Pattern::Sequential {
                prop_assert_eq!(r.lba % r.blocks as u64, 0);
            }
            prop_assert!(r.lba + r.blocks as u64 <= logical);
        }
        let again: Vec<_> = Generator::new(&spec, logical).unwrap().collect();
        prop_assert_eq!(reqs, again);
    }

    #[test]
    fn traces_round_trip(recs in prop::collection::vec((0u64..1000, any::<bool>(), 0u64..1 << 20, 1u64..64), 0..50)) {
        let mut t = 0;
        let recs: Vec<TraceRecord> = recs
            .into_iter()
            .map(|(dt, w, off, len)| {
                t += dt;
                TraceRecord { time_us: t, op: if w { Op::Write } else { Op::Read }, offset: off * 4096, length: len * 4096 }
            })
            .collect();
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        prop_assert_eq!(parse_trace(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn byte_sizes_scale_by_unit(n in 0u64..100_000) {
        prop_assert_eq!(parse_bytes(&n.to_string()), Some(n));
        prop_assert_eq!(parse_bytes(&format!("{n}K")), Some(n << 10));
        prop_assert_eq!(parse_bytes(&format!("{n}MiB")), Some(n << 20));
    }
}
