//! Feeds requests into a volume at a bounded queue depth and checks every
//! completion against the shadow model.

use std::collections::{BTreeMap, HashMap};

use raid_engine::{Completion, EngineError, RequestId, Volume};
use zns_device::{SimTime, BLOCK_SIZE};

use crate::metrics::{MetricsSnapshot, Recorder};
use crate::shadow::{Checksum, PayloadMode, Shadow};
use crate::workload::{Op, Request};
use crate::HarnessError;

enum InFlight {
    Write { lba: u64, n: u32, tag: u64 },
    Read { lba: u64, floors: Vec<u64> },
}

/// Result of reading the whole volume back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Readback {
    pub checksum: u32,
    pub mapped_blocks: u64,
    pub mismatches: u64,
}

pub struct Driver {
    pub volume: Volume,
    pub shadow: Shadow,
    inflight: HashMap<RequestId, InFlight>,
    /// First few verification failures, for reporting.
    pub failures: Vec<String>,
}

const MAX_REPORTED: usize = 8;

impl Driver {
    pub fn new(volume: Volume, seed: u64, mode: PayloadMode) -> Driver {
        let shadow = Shadow::new(volume.logical_blocks(), seed, mode);
        Driver {
            volume,
            shadow,
            inflight: HashMap::new(),
            failures: Vec::new(),
        }
    }

    /// Continues checking against an existing shadow, e.g. after recovery.
    pub fn with_shadow(volume: Volume, shadow: Shadow) -> Driver {
        Driver {
            volume,
            shadow,
            inflight: HashMap::new(),
            failures: Vec::new(),
        }
    }

    pub fn inflight(&self) -> usize {
        self.inflight.len()
    }

    pub fn submit(&mut self, r: Request) -> RequestId {
        match r.op {
            Op::Write => {
                let (data, tag) = self.shadow.begin_write(r.lba, r.blocks);
                let id = self.volume.submit_write(r.lba, data);
                self.inflight.insert(
                    id,
                    InFlight::Write {
                        lba: r.lba,
                        n: r.blocks,
                        tag,
                    },
                );
                id
            }
            Op::Read => {
                let floors = (r.lba..r.lba + r.blocks as u64).map(|l| self.shadow.floor(l)).collect();
                let id = self.volume.submit_read(r.lba, r.blocks);
                self.inflight.insert(id, InFlight::Read { lba: r.lba, floors });
                id
            }
        }
    }

    fn fail(&mut self, rec: &mut Recorder, msg: String) {
        rec.verify_failures += 1;
        if self.failures.len() < MAX_REPORTED {
            self.failures.push(msg);
        }
    }

    fn complete(&mut self, c: Completion, rec: &mut Recorder) {
        let Some(job) = self.inflight.remove(&c.id) else {
            return;
        };
        let bytes = c.blocks as u64 * BLOCK_SIZE as u64;
        rec.record(c.kind, bytes, c.submitted_at, c.completed_at);
        match job {
            InFlight::Write { lba, n, tag } => match c.error {
                None => self.shadow.ack_write(lba, n, tag),
                Some(e) => {
                    rec.errors += 1;
                    self.fail(rec, format!("write at {lba} failed: {e}"));
                }
            },
            InFlight::Read { lba, floors } => {
                let unmapped_only = matches!(c.error, Some(EngineError::UnmappedLba(_)));
                if c.error.is_some() {
                    rec.errors += 1;
                }
                for (i, floor) in floors.into_iter().enumerate() {
                    let l = lba + i as u64;
                    let ok = match &c.error {
                        // the engine reports one error per request; blocks it
                        // left empty are judged by the shadow alone
                        Some(e) if !unmapped_only => self.shadow.check(l, floor, Err(e)),
                        Some(_) if c.data[i].is_none() => {
                            self.shadow.check(l, floor, Err(&EngineError::UnmappedLba(l)))
                                || self.shadow.check(l, floor, Ok(&c.data[i]))
                        }
                        _ => self.shadow.check(l, floor, Ok(&c.data[i])),
                    };
                    if !ok {
                        self.fail(rec, format!("read of {l} returned unexpected data"));
                    }
                }
            }
        }
    }

    fn collect(&mut self, rec: &mut Recorder) {
        for c in self.volume.take_completions() {
            self.complete(c, rec);
        }
    }

    /// Handles completions already delivered, without timing them.
    pub fn drain(&mut self) {
        let mut rec = Recorder::new(self.volume.now());
        self.collect(&mut rec);
    }

    /// Closed loop: keeps `qd` requests outstanding until `reqs` runs dry.
    pub fn run_closed(&mut self, reqs: impl IntoIterator<Item = Request>, qd: usize) -> Result<Recorder, HarnessError> {
        let mut rec = Recorder::new(self.volume.now());
        let mut reqs = reqs.into_iter();
        let mut more = true;
        loop {
            while more && self.inflight.len() < qd {
                match reqs.next() {
                    Some(r) => {
                        self.submit(r);
                    }
                    None => more = false,
                }
            }
            self.collect(&mut rec);
            if self.inflight.is_empty() && !more {
                break;
            }
            if (self.inflight.len() >= qd || !more) && !self.volume.step() {
                return Err(HarnessError::Stalled(self.inflight.len()));
            }
        }
        Ok(rec)
    }

    /// Like [`Driver::run_closed`], but stops submitting once the armed
    /// crash trips. Completions from the tripping step still count: a step
    /// finishes one device command, so its acks were durable before the
    /// crash. Everything later is dropped unacknowledged. Returns whether
    /// the crash tripped.
    pub fn run_crashable(&mut self, reqs: impl IntoIterator<Item = Request>, qd: usize) -> Result<bool, HarnessError> {
        let mut rec = Recorder::new(self.volume.now());
        let mut reqs = reqs.into_iter().peekable();
        loop {
            while self.inflight.len() < qd && !self.volume.array().crash_tripped() {
                match reqs.next() {
                    Some(r) => {
                        self.submit(r);
                    }
                    None => break,
                }
            }
            if self.volume.array().crash_tripped() || (self.inflight.is_empty() && reqs.peek().is_none()) {
                break;
            }
            if !self.volume.step() {
                return Err(HarnessError::Stalled(self.inflight.len()));
            }
            self.collect(&mut rec);
        }
        let tripped = self.volume.array().crash_tripped();
        self.volume.run_until_idle();
        if tripped {
            self.volume.take_completions();
            self.inflight.clear();
        } else {
            self.collect(&mut rec);
        }
        Ok(tripped)
    }

    /// Reads every LBA and checks it against the shadow, allowing any
    /// data between the newest acknowledged and the newest submitted
    /// write. Returns the number of bad blocks.
    pub fn audit(&mut self, batch_blocks: u32, qd: usize) -> Result<u64, HarnessError> {
        let total = self.volume.logical_blocks();
        let reqs = (0..total.div_ceil(batch_blocks as u64)).map(|i| {
            let lba = i * batch_blocks as u64;
            Request {
                op: Op::Read,
                lba,
                blocks: (total - lba).min(batch_blocks as u64) as u32,
            }
        });
        let rec = self.run_closed(reqs, qd)?;
        Ok(rec.verify_failures)
    }

    /// Open loop: each request is submitted at its arrival time, or as soon
    /// after it as the queue depth allows.
    pub fn run_open(&mut self, reqs: &[(SimTime, Request)], qd: usize) -> Result<Recorder, HarnessError> {
        let base = self.volume.now();
        let mut rec = Recorder::new(base);
        let mut next = 0;
        loop {
            while next < reqs.len() && self.inflight.len() < qd && base + reqs[next].0 <= self.volume.now() {
                self.submit(reqs[next].1);
                next += 1;
            }
            self.collect(&mut rec);
            if next == reqs.len() && self.inflight.is_empty() {
                break;
            }
            let arrival = (next < reqs.len() && self.inflight.len() < qd).then(|| base + reqs[next].0);
            match (self.volume.next_event_time(), arrival) {
                (Some(t), Some(a)) if a < t => self.volume.run_until(a),
                (Some(_), _) => {
                    self.volume.step();
                }
                (None, Some(a)) => self.volume.run_until(a),
                (None, None) => return Err(HarnessError::Stalled(self.inflight.len())),
            }
        }
        Ok(rec)
    }

    /// Writes the whole logical space once, sequentially, without
    /// measuring.
    pub fn prefill(&mut self, request_blocks: u32, qd: usize) -> Result<(), HarnessError> {
        let total = self.volume.logical_blocks();
        let reqs = (0..total.div_ceil(request_blocks as u64)).map(|i| {
            let lba = i * request_blocks as u64;
            Request {
                op: Op::Write,
                lba,
                blocks: (total - lba).min(request_blocks as u64) as u32,
            }
        });
        let rec = self.run_closed(reqs, qd)?;
        self.volume.run_until_idle();
        if rec.verify_failures > 0 {
            return Err(HarnessError::Verify(self.failures.join("; ")));
        }
        Ok(())
    }

    /// Reads every LBA once all writes are done and compares it with the
    /// newest data written there.
    pub fn readback(&mut self, batch_blocks: u32, qd: usize) -> Result<Readback, HarnessError> {
        self.volume.run_until_idle();
        let mut rec = Recorder::new(self.volume.now());
        self.collect(&mut rec);
        if !self.inflight.is_empty() {
            return Err(HarnessError::Stalled(self.inflight.len()));
        }
        let total = self.volume.logical_blocks();
        let mut sum = Checksum::default();
        let mut out = Readback {
            checksum: 0,
            mapped_blocks: 0,
            mismatches: 0,
        };
        let mut pending: HashMap<RequestId, u64> = HashMap::new();
        // completions arrive out of order; fold them in LBA order
        let mut ready: BTreeMap<u64, Completion> = BTreeMap::new();
        let mut folded = 0u64;
        let mut lba = 0;
        while folded < total {
            while lba < total && pending.len() < qd {
                let n = (total - lba).min(batch_blocks as u64) as u32;
                pending.insert(self.volume.submit_read(lba, n), lba);
                lba += n as u64;
            }
            let stepped = self.volume.step();
            for c in self.volume.take_completions() {
                if let Some(l) = pending.remove(&c.id) {
                    ready.insert(l, c);
                }
            }
            while let Some(c) = ready.remove(&folded) {
                self.fold(folded, &c, &mut sum, &mut out);
                folded += c.blocks as u64;
            }
            if !stepped && folded < total && pending.is_empty() && ready.is_empty() && lba >= total {
                return Err(HarnessError::Stalled(0));
            }
            if !stepped && !pending.is_empty() {
                return Err(HarnessError::Stalled(pending.len()));
            }
        }
        out.checksum = sum.finish();
        Ok(out)
    }

    fn fold(&mut self, start: u64, c: &Completion, sum: &mut Checksum, out: &mut Readback) {
        // a request reports only its first error; an unmapped block must
        // really be unwritten, any other error spoils the whole request
        let spoiled = match &c.error {
            None => false,
            Some(EngineError::UnmappedLba(x)) => self.shadow.expected(*x).is_some(),
            Some(_) => true,
        };
        for (i, got) in c.data.iter().enumerate() {
            let l = start + i as u64;
            let want = self.shadow.expected(l);
            let bad = spoiled
                || match &want {
                    None => got.is_some(),
                    Some(w) => got != w,
                };
            if bad {
                out.mismatches += 1;
                if self.failures.len() < MAX_REPORTED {
                    self.failures.push(format!("readback of {l} differs"));
                }
            }
            if want.is_some() {
                out.mapped_blocks += 1;
                sum.add(l, got);
            }
        }
    }

    pub fn snapshot(&self, rec: &Recorder, before: &raid_engine::EngineStats) -> MetricsSnapshot {
        rec.snapshot(before, &self.volume.stats(), self.volume.cst_memory_bytes())
    }
}
