//! The runs behind each CLI subcommand, usable from tests as well.

use std::collections::BTreeSet;
use std::io::Write;

use erasure_codec::RaidScheme;
use raid_engine::{Volume, VolumeConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recovery::{rebuild_drives, recover_crash, RebuildReport, RecoveryReport};
use segment_layout::{compute_geometry, cst_max_bytes, position_of_drive, SegmentGeometry};
use zns_device::{DeviceArray, DeviceGeometry, SimTime, BLOCK_SIZE};

use crate::config::RunConfig;
use crate::driver::{Driver, Readback};
use crate::metrics::MetricsSnapshot;
use crate::shadow::PayloadMode;
use crate::trace::{schedule, TraceRecord};
use crate::workload::{Generator, Op, Pattern, Request, WorkloadSpec};
use crate::HarnessError;

/// Device and engine configuration for one run.
#[derive(Clone, Debug)]
pub struct Setup {
    pub device: DeviceGeometry,
    pub volume: VolumeConfig,
}

impl Setup {
    pub fn from_run(run: &RunConfig) -> Result<Setup, HarnessError> {
        run.device.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Setup {
            device: run.device.clone(),
            volume: run.volume_config()?,
        })
    }

    pub fn fresh(&self) -> Result<Volume, HarnessError> {
        let array = DeviceArray::new(self.device.clone(), self.volume.scheme.width())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Volume::create(self.volume.clone(), array)?)
    }

    pub fn logical_blocks(&self) -> u64 {
        self.volume.logical_blocks(&self.device)
    }

    fn driver(&self, seed: u64, mode: PayloadMode) -> Result<Driver, HarnessError> {
        Ok(Driver::new(self.fresh()?, seed, mode))
    }
}

/// Readback batch for whole-volume verification.
const VERIFY_BATCH: u32 = 16;
/// Request size for sequential fills.
const FILL_BLOCKS: u32 = 16;

fn sequential(from: u64, blocks: u64, request: u32) -> impl Iterator<Item = Request> {
    (0..blocks.div_ceil(request as u64)).map(move |i| {
        let lba = from + i * request as u64;
        Request {
            op: Op::Write,
            lba,
            blocks: (from + blocks - lba).min(request as u64) as u32,
        }
    })
}

/// One line of CSV output: ordered `(column, value)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Row(pub Vec<(String, String)>);

impl Row {
    pub fn with(mut self, column: &str, value: impl ToString) -> Row {
        self.0.push((column.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, column: &str) -> Option<&str> {
        self.0.iter().find(|(c, _)| c == column).map(|(_, v)| v.as_str())
    }

    pub fn setup(self, s: &Setup) -> Row {
        let v = &s.volume;
        self.with("scheme", v.scheme.kind)
            .with("k", v.scheme.k)
            .with("m", v.scheme.m)
            .with("layout", v.layout)
            .with("chunk_small", v.chunk_small_bytes)
            .with("chunk_large", v.chunk_large_bytes)
            .with("ns", v.n_small)
            .with("nl", v.n_large)
            .with("group_size", v.group_size)
            .with("reserved", v.reserved)
            .with("l2p_cap_groups", v.l2p_cap(&s.device))
            .with("logical_blocks", s.logical_blocks())
    }

    pub fn metrics(self, m: &MetricsSnapshot) -> Row {
        self.with("ops", m.ops)
            .with("reads", m.reads)
            .with("writes", m.writes)
            .with("read_bytes", m.read_bytes)
            .with("write_bytes", m.write_bytes)
            .with("elapsed_us", m.elapsed_us)
            .with("throughput_mib_s", m.throughput_mib_s)
            .with("p50_us", m.p50_us)
            .with("p95_us", m.p95_us)
            .with("p99_us", m.p99_us)
            .with("read_p50_us", m.read_p50_us)
            .with("read_p95_us", m.read_p95_us)
            .with("write_p50_us", m.write_p50_us)
            .with("write_p95_us", m.write_p95_us)
            .with("write_amplification", m.write_amplification)
            .with("gc_runs", m.gc_runs)
            .with("gc_blocks_moved", m.gc_blocks_moved)
            .with("degraded_reads", m.degraded_reads)
            .with("cst_inspected_max", m.cst_inspected_max)
            .with("l2p_fetch_reads", m.l2p_fetch_reads)
            .with("mapping_blocks", m.mapping_blocks)
            .with("cst_memory_bytes", m.cst_memory_bytes)
            .with("errors", m.errors)
            .with("verify_failures", m.verify_failures)
    }
}

/// Writes rows sharing the first row's columns.
pub fn write_rows<W: Write>(out: W, rows: &[Row]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = rows.first() {
        w.write_record(first.0.iter().map(|(c, _)| c))?;
        for r in rows {
            if r.0.len() != first.0.len() || r.0.iter().zip(&first.0).any(|(a, b)| a.0 != b.0) {
                return Err(HarnessError::Config("rows with different columns".into()));
            }
            w.write_record(r.0.iter().map(|(_, v)| v))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub workload: WorkloadSpec,
    /// Drives failed after the prefill; the workload must be read-only.
    pub fail: Vec<usize>,
    /// Read the whole volume back afterwards.
    pub verify: bool,
    pub payload: PayloadMode,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub metrics: MetricsSnapshot,
    pub readback: Option<Readback>,
    pub failures: Vec<String>,
}

impl BenchResult {
    pub fn passed(&self) -> bool {
        self.metrics.verify_failures == 0 && self.readback.is_none_or(|r| r.mismatches == 0)
    }
}

pub fn bench(setup: &Setup, opts: &BenchOptions) -> Result<BenchResult, HarnessError> {
    let w = &opts.workload;
    w.validate()?;
    if !opts.fail.is_empty() && w.read_fraction < 1.0 {
        return Err(HarnessError::Config(
            "a degraded volume rejects writes; use a read-only workload".into(),
        ));
    }
    let mut d = setup.driver(w.seed, opts.payload)?;
    if w.prefill {
        d.prefill(FILL_BLOCKS, w.qd)?;
    }
    for &f in &opts.fail {
        d.volume.fail_drive(f)?;
    }
    let before = d.volume.stats();
    let gen = Generator::new(w, d.volume.logical_blocks())?;
    let rec = d.run_closed(gen, w.qd)?;
    let metrics = d.snapshot(&rec, &before);
    let readback = if opts.verify {
        Some(d.readback(VERIFY_BATCH, w.qd)?)
    } else {
        None
    };
    Ok(BenchResult {
        metrics,
        readback,
        failures: d.failures,
    })
}

/// Replays a trace open-loop (each request at its arrival time, queue
/// depth permitting) or closed-loop (back to back).
pub fn replay(
    setup: &Setup,
    records: &[TraceRecord],
    qd: usize,
    closed_loop: bool,
    seed: u64,
) -> Result<BenchResult, HarnessError> {
    let mut d = setup.driver(seed, PayloadMode::Full)?;
    let sched = schedule(records, d.volume.logical_blocks())?;
    let before = d.volume.stats();
    let rec = if closed_loop {
        d.run_closed(sched.iter().map(|(_, r)| *r), qd)?
    } else {
        d.run_open(&sched, qd)?
    };
    let metrics = d.snapshot(&rec, &before);
    Ok(BenchResult {
        metrics,
        readback: None,
        failures: d.failures,
    })
}

/// Issues `overwrite` times the logical size in writes, starting from an
/// empty volume, then reads everything back. Only the pattern, sizes,
/// queue depth and seed of `spec` are used.
pub fn gc_stress(setup: &Setup, overwrite: f64, spec: &WorkloadSpec) -> Result<BenchResult, HarnessError> {
    let logical = setup.logical_blocks() * BLOCK_SIZE as u64;
    let opts = BenchOptions {
        workload: WorkloadSpec {
            read_fraction: 0.0,
            prefill: false,
            total_bytes: (logical as f64 * overwrite) as u64,
            ..spec.clone()
        },
        fail: Vec::new(),
        verify: true,
        payload: PayloadMode::Full,
    };
    bench(setup, &opts)
}

/// Which crash points to try.
#[derive(Clone, Debug, PartialEq)]
pub enum CrashPoints {
    /// After every device command of the workload, and before the first.
    All,
    List(Vec<u64>),
    /// `count` points drawn uniformly from the whole run.
    Random {
        count: usize,
        seed: u64,
    },
    /// `count` points drawn from commands issued while cleaning was active.
    MidGc {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrashVerdict {
    /// Device commands completed before the crash.
    pub point: u64,
    pub acked_blocks: u64,
    pub bad_blocks: u64,
    pub error: Option<String>,
    pub report: RecoveryReport,
}

impl CrashVerdict {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.bad_blocks == 0
    }
}

#[derive(Clone, Debug)]
pub struct CrashOptions {
    pub workload: WorkloadSpec,
    /// Number of write requests issued.
    pub writes: usize,
    pub points: CrashPoints,
}

/// What a crash-free run of the workload looked like.
#[derive(Clone, Debug)]
pub struct DryRun {
    pub mutations: u64,
    /// Mutation counts at which cleaning was in progress.
    pub gc_points: Vec<u64>,
}

fn crash_requests(opts: &CrashOptions, logical: u64) -> Result<Vec<Request>, HarnessError> {
    let spec = WorkloadSpec {
        read_fraction: 0.0,
        total_bytes: u64::MAX,
        ..opts.workload.clone()
    };
    Ok(Generator::new(&spec, logical)?.take(opts.writes).collect())
}

pub fn dry_run(setup: &Setup, opts: &CrashOptions) -> Result<DryRun, HarnessError> {
    let mut d = setup.driver(opts.workload.seed, PayloadMode::Full)?;
    let reqs = crash_requests(opts, d.volume.logical_blocks())?;
    let qd = opts.workload.qd;
    let mut gc = BTreeSet::new();
    let mut next = 0;
    loop {
        while d.inflight() < qd && next < reqs.len() {
            d.submit(reqs[next]);
            next += 1;
        }
        if d.inflight() == 0 && next == reqs.len() {
            break;
        }
        if !d.volume.step() {
            return Err(HarnessError::Stalled(d.inflight()));
        }
        if d.volume.gc_active() {
            gc.insert(d.volume.array().mutations());
        }
        d.drain();
    }
    // cleaning may still be running after the last ack
    while d.volume.step() {
        if d.volume.gc_active() {
            gc.insert(d.volume.array().mutations());
        }
    }
    Ok(DryRun {
        mutations: d.volume.array().mutations(),
        gc_points: gc.into_iter().collect(),
    })
}

fn pick(from: &[u64], count: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<u64> = sample(&mut rng, from.len(), count.min(from.len()))
        .into_iter()
        .map(|i| from[i])
        .collect();
    out.sort_unstable();
    out
}

pub fn crash_points(dry: &DryRun, points: &CrashPoints) -> Vec<u64> {
    match points {
        CrashPoints::All => (0..=dry.mutations).collect(),
        CrashPoints::List(l) => l.clone(),
        CrashPoints::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out: Vec<u64> = (0..*count).map(|_| rng.random_range(0..=dry.mutations)).collect();
            out.sort_unstable();
            out
        }
        CrashPoints::MidGc { count, seed } => pick(&dry.gc_points, *count, *seed),
    }
}

/// Runs the workload until the crash at `point`, recovers from the
/// durable image and audits every LBA. Returns the recovered driver too.
pub fn crash_at(
    setup: &Setup,
    opts: &CrashOptions,
    point: u64,
) -> Result<(CrashVerdict, Option<Driver>), HarnessError> {
    let mut d = setup.driver(opts.workload.seed, PayloadMode::Full)?;
    let reqs = crash_requests(opts, d.volume.logical_blocks())?;
    d.volume.array_mut().arm_crash(point);
    d.run_crashable(reqs, opts.workload.qd)?;
    let image = match d.volume.array_mut().take_crash_image() {
        Some(i) => i,
        // past the end of the run
        None => d.volume.array().crash_image(),
    };
    let acked_blocks = (0..d.shadow.logical_blocks())
        .filter(|&l| d.shadow.floor(l) > 0)
        .count() as u64;
    let mut verdict = CrashVerdict {
        point,
        acked_blocks,
        bad_blocks: 0,
        error: None,
        report: RecoveryReport::default(),
    };
    let shadow = d.shadow.clone();
    match recover_crash(setup.volume.clone(), image) {
        Ok((v, report)) => {
            verdict.report = report;
            let mut r = Driver::with_shadow(v, shadow);
            verdict.bad_blocks = r.audit(VERIFY_BATCH, opts.workload.qd)?;
            if let Some(f) = r.failures.first() {
                verdict.error = Some(f.clone());
            }
            Ok((verdict, Some(r)))
        }
        Err(e) => {
            verdict.error = Some(e.to_string());
            Ok((verdict, None))
        }
    }
}

pub fn crashtest(setup: &Setup, opts: &CrashOptions) -> Result<Vec<CrashVerdict>, HarnessError> {
    let dry = dry_run(setup, opts)?;
    crash_points(&dry, &opts.points)
        .into_iter()
        .map(|p| crash_at(setup, opts, p).map(|(v, _)| v))
        .collect()
}

/// Recovers the crash at `point` twice in a row and checks the second pass
/// changes nothing: same zone images, same readback.
pub fn recovery_idempotent(setup: &Setup, opts: &CrashOptions, point: u64) -> Result<bool, HarnessError> {
    let (verdict, once) = crash_at(setup, opts, point)?;
    let Some(mut once) = once else {
        return Err(HarnessError::Verify(verdict.error.unwrap_or_default()));
    };
    let image = once.volume.array().crash_image();
    let (v, report) = recover_crash(setup.volume.clone(), image.clone())?;
    let mut twice = Driver::with_shadow(v, once.shadow.clone());
    let zones_equal = (0..image.width())
        .all(|d| (0..setup.device.num_zones).all(|z| image.drive(d).zone_image_eq(twice.volume.array().drive(d), z)));
    let a = once.readback(VERIFY_BATCH, opts.workload.qd)?;
    let b = twice.readback(VERIFY_BATCH, opts.workload.qd)?;
    Ok(zones_equal
        && a.checksum == b.checksum
        && report.segments_relocated == 0
        && report.partial_stripes_discarded == 0)
}

/// Fills `bytes` sequentially with zero payloads, crashes at rest and
/// reports the recovery.
pub fn recovery_after_fill(setup: &Setup, bytes: u64, qd: usize) -> Result<RecoveryReport, HarnessError> {
    let mut d = setup.driver(0, PayloadMode::Zero)?;
    let blocks = (bytes / BLOCK_SIZE as u64).min(d.volume.logical_blocks());
    d.run_closed(sequential(0, blocks, FILL_BLOCKS), qd)?;
    d.volume.run_until_idle();
    let image = d.volume.array().crash_image();
    drop(d);
    let (_, report) = recover_crash(setup.volume.clone(), image)?;
    Ok(report)
}

/// Coefficient of determination of the least-squares line through
/// `points`.
pub fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

#[derive(Clone, Debug)]
pub struct RebuildOutcome {
    pub report: RebuildReport,
    /// Zones on the rebuilt drives that differ from before the failure.
    pub zones_differing: u64,
    pub zones_compared: u64,
    pub bad_blocks: u64,
}

impl RebuildOutcome {
    pub fn passed(&self) -> bool {
        self.zones_differing == 0 && self.bad_blocks == 0
    }
}

/// Fills `bytes`, loses `fail`, rebuilds them onto blank drives and
/// compares every zone of the rebuilt drives with its pre-failure image.
pub fn rebuild(
    setup: &Setup,
    bytes: u64,
    fail: &[usize],
    payload: PayloadMode,
    qd: usize,
    seed: u64,
) -> Result<RebuildOutcome, HarnessError> {
    let mut d = setup.driver(seed, payload)?;
    let blocks = (bytes / BLOCK_SIZE as u64).min(d.volume.logical_blocks());
    d.run_closed(sequential(0, blocks, FILL_BLOCKS), qd)?;
    d.volume.run_until_idle();
    let reference = d.volume.array().crash_image();
    for &f in fail {
        d.volume.fail_drive(f)?;
    }
    let report = rebuild_drives(&mut d.volume, fail)?;
    let mut out = RebuildOutcome {
        report,
        zones_differing: 0,
        zones_compared: 0,
        bad_blocks: 0,
    };
    for &f in fail {
        for z in 0..setup.device.num_zones {
            out.zones_compared += 1;
            if !reference.drive(f).zone_image_eq(d.volume.array().drive(f), z) {
                out.zones_differing += 1;
            }
        }
    }
    if blocks > 0 {
        out.bad_blocks = d.audit(VERIFY_BATCH, qd)?;
    }
    Ok(out)
}

/// Failure sets of up to `m` drives the scheme survives for every stripe
/// rotation.
pub fn admissible_failures(scheme: &RaidScheme) -> Vec<Vec<usize>> {
    let n = scheme.width();
    (1u32..1 << n)
        .filter(|mask| mask.count_ones() as usize <= scheme.m)
        .map(|mask| (0..n).filter(|d| mask & (1 << d) != 0).collect::<Vec<_>>())
        .filter(|set| {
            (0..n as u32).all(|seq| {
                let lost: Vec<usize> = set.iter().map(|&d| position_of_drive(scheme, seq, d)).collect();
                scheme.tolerates(&lost)
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DegradedResult {
    pub failed: Vec<usize>,
    pub reads: u64,
    pub bad_blocks: u64,
    pub metrics: MetricsSnapshot,
}

/// Fills the whole volume, fails `failed`, then issues `reads` random
/// reads with the sizes of `workload` and checks each block against the
/// shadow.
pub fn degraded_reads(
    setup: &Setup,
    workload: &WorkloadSpec,
    failed: &[usize],
    reads: usize,
) -> Result<DegradedResult, HarnessError> {
    let mut d = setup.driver(workload.seed, PayloadMode::Full)?;
    d.prefill(FILL_BLOCKS, workload.qd)?;
    for &f in failed {
        d.volume.fail_drive(f)?;
    }
    let spec = WorkloadSpec {
        pattern: Pattern::Random,
        read_fraction: 1.0,
        total_bytes: u64::MAX,
        ..workload.clone()
    };
    let before = d.volume.stats();
    let rec = d.run_closed(
        Generator::new(&spec, d.volume.logical_blocks())?.take(reads),
        workload.qd,
    )?;
    let metrics = d.snapshot(&rec, &before);
    Ok(DegradedResult {
        failed: failed.to_vec(),
        reads: metrics.reads,
        bad_blocks: rec.verify_failures,
        metrics,
    })
}

/// Median latency of single-block reads that each land on a failed drive,
/// issued one at a time so queueing does not blur the decode cost.
pub fn degraded_latency(
    setup: &Setup,
    workload: &WorkloadSpec,
    failed: &[usize],
    reads: usize,
) -> Result<DegradedResult, HarnessError> {
    let mut d = setup.driver(workload.seed, PayloadMode::Full)?;
    d.prefill(FILL_BLOCKS, workload.qd)?;
    for &f in failed {
        d.volume.fail_drive(f)?;
    }
    let lost: Vec<u64> = (0..d.volume.logical_blocks())
        .filter(|&lba| match d.volume.l2p().peek(lba) {
            Some(Some(pba)) => failed.contains(&d.volume.decode_pba(pba).drive),
            _ => false,
        })
        .collect();
    if lost.is_empty() {
        return Err(HarnessError::Config("no resident block sits on a failed drive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(workload.seed);
    let reqs: Vec<Request> = (0..reads)
        .map(|_| Request {
            op: Op::Read,
            lba: lost[rng.random_range(0..lost.len())],
            blocks: 1,
        })
        .collect();
    let before = d.volume.stats();
    let rec = d.run_closed(reqs, 1)?;
    let metrics = d.snapshot(&rec, &before);
    Ok(DegradedResult {
        failed: failed.to_vec(),
        reads: metrics.reads,
        bad_blocks: rec.verify_failures,
        metrics,
    })
}

/// Segment regions for one zone, plus the compact stripe table bound for
/// a whole array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometryReport {
    pub geometry: SegmentGeometry,
    pub cst_max_bytes: u128,
}

pub fn geometry(
    zone_capacity: u32,
    chunk_blocks: u32,
    drives: u64,
    zones: u64,
    stripes: Option<u64>,
    group_size: u32,
) -> Result<GeometryReport, HarnessError> {
    let g = compute_geometry(zone_capacity, chunk_blocks)
        .map_err(|e| HarnessError::Config(e.to_string()))?
        .with_group_size(group_size.max(1));
    Ok(GeometryReport {
        geometry: g,
        cst_max_bytes: cst_max_bytes(drives, stripes.unwrap_or(g.stripes as u64), zones, group_size.max(1)),
    })
}

/// Simulated duration helper for reports.
pub fn ns_to_ms(t: SimTime) -> f64 {
    t as f64 / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;
    use erasure_codec::RaidKind;

    #[test]
    fn admissible_sets() {
        let r5 = RaidScheme::four_drive(RaidKind::Raid5);
        assert_eq!(admissible_failures(&r5).len(), 4);
        let r6 = RaidScheme::four_drive(RaidKind::Raid6);
        assert_eq!(admissible_failures(&r6).len(), 10);
        // mirrored pairs (0,2) and (1,3): losing both halves of one pair is fatal
        let r01 = RaidScheme::four_drive(RaidKind::Raid01);
        let sets = admissible_failures(&r01);
        assert!(sets.contains(&vec![0, 1]));
        assert!(!sets.contains(&vec![0, 2]));
    }

    #[test]
    fn r_squared_of_a_line() {
        let pts: Vec<(f64, f64)> = (1..5).map(|x| (x as f64, 3.0 * x as f64 + 1.0)).collect();
        assert!((r_squared(&pts) - 1.0).abs() < 1e-12);
        let noisy = [(1.0, 1.0), (2.0, 3.0), (3.0, 2.0), (4.0, 4.0)];
        assert!(r_squared(&noisy) < 0.9);
    }

    #[test]
    fn rows_keep_column_order() {
        let rows = vec![
            Row::default().with("b", 1).with("a", 2),
            Row::default().with("b", 3).with("a", 4),
        ];
        let mut out = Vec::new();
        write_rows(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "b,a\n1,2\n3,4\n");
        let bad = vec![Row::default().with("a", 1), Row::default().with("b", 1)];
        assert!(write_rows(Vec::new(), &bad).is_err());
    }
}
