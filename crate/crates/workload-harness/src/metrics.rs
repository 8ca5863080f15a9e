use raid_engine::{EngineStats, RequestKind};
use serde::Serialize;
use zns_device::SimTime;

/// Nearest-rank percentile of an ascending slice, `0` when empty.
pub fn percentile(sorted: &[SimTime], p: f64) -> SimTime {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Raw per-run counters, turned into a snapshot at the end.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    pub read_latencies: Vec<SimTime>,
    pub write_latencies: Vec<SimTime>,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub start: SimTime,
    pub end: SimTime,
    pub errors: u64,
    pub verify_failures: u64,
}

impl Recorder {
    pub fn new(start: SimTime) -> Recorder {
        Recorder {
            start,
            end: start,
            ..Default::default()
        }
    }

    pub fn record(&mut self, kind: RequestKind, bytes: u64, submitted: SimTime, completed: SimTime) {
        let lat = completed - submitted;
        match kind {
            RequestKind::Read => {
                self.read_latencies.push(lat);
                self.read_bytes += bytes;
            }
            RequestKind::Write => {
                self.write_latencies.push(lat);
                self.write_bytes += bytes;
            }
        }
        self.end = self.end.max(completed);
    }

    /// Everything measured so far, with engine counters taken as the
    /// difference between `before` and `after`.
    pub fn snapshot(&self, before: &EngineStats, after: &EngineStats, cst_memory_bytes: usize) -> MetricsSnapshot {
        let mut reads = self.read_latencies.clone();
        let mut writes = self.write_latencies.clone();
        reads.sort_unstable();
        writes.sort_unstable();
        let mut all: Vec<SimTime> = reads.iter().chain(writes.iter()).copied().collect();
        all.sort_unstable();
        let elapsed = self.end - self.start;
        let bytes = self.read_bytes + self.write_bytes;
        let us = |t: SimTime| t as f64 / 1000.0;
        let user = after.gc.user_blocks - before.gc.user_blocks;
        let moved = after.gc.gc_blocks - before.gc.gc_blocks;
        MetricsSnapshot {
            ops: all.len() as u64,
            reads: reads.len() as u64,
            writes: writes.len() as u64,
            read_bytes: self.read_bytes,
            write_bytes: self.write_bytes,
            elapsed_us: us(elapsed),
            throughput_mib_s: if elapsed == 0 {
                0.0
            } else {
                bytes as f64 / (1 << 20) as f64 / (elapsed as f64 / 1e9)
            },
            p50_us: us(percentile(&all, 50.0)),
            p95_us: us(percentile(&all, 95.0)),
            p99_us: us(percentile(&all, 99.0)),
            read_p50_us: us(percentile(&reads, 50.0)),
            read_p95_us: us(percentile(&reads, 95.0)),
            write_p50_us: us(percentile(&writes, 50.0)),
            write_p95_us: us(percentile(&writes, 95.0)),
            write_amplification: if user == 0 {
                1.0
            } else {
                (user + moved) as f64 / user as f64
            },
            gc_runs: after.gc.runs - before.gc.runs,
            gc_blocks_moved: moved,
            degraded_reads: after.degraded_reads - before.degraded_reads,
            cst_inspected_max: after.cst_inspected_max,
            l2p_fetch_reads: after.l2p_fetch_reads - before.l2p_fetch_reads,
            mapping_blocks: after.mapping_blocks - before.mapping_blocks,
            cst_memory_bytes: cst_memory_bytes as u64,
            errors: self.errors,
            verify_failures: self.verify_failures,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub ops: u64,
    pub reads: u64,
    pub writes: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
    /// Simulated time from the first submission to the last completion.
    pub elapsed_us: f64,
    pub throughput_mib_s: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub read_p50_us: f64,
    pub read_p95_us: f64,
    pub write_p50_us: f64,
    pub write_p95_us: f64,
    pub write_amplification: f64,
    pub gc_runs: u64,
    pub gc_blocks_moved: u64,
    pub degraded_reads: u64,
    pub cst_inspected_max: u64,
    pub l2p_fetch_reads: u64,
    pub mapping_blocks: u64,
    pub cst_memory_bytes: u64,
    pub errors: u64,
    pub verify_failures: u64,
}
