//! Read path: L2P lookup, device reads and degraded reads.

use l2p_index::{group_of, parse_group};
use segment_layout::{position_of_drive, Oob, WriteMode};
use zns_device::{StoredBlock, BLOCK_SIZE};

use crate::codec::reconstruct_block;
use crate::volume::{DegradedPlan, Event, ReadJob, ReadPurpose, Volume, Waiter};
use crate::{EngineError, RequestId};

impl Volume {
    pub(crate) fn start_lookup(&mut self, request: RequestId, index: usize, lba: u64) {
        let group = group_of(lba);
        self.l2p.pin(group);
        self.when_resident(group, Waiter::Lookup { request, index, lba });
    }

    pub(crate) fn resolve_read(&mut self, request: RequestId, index: usize, lba: u64) {
        let found = self.l2p.get(lba);
        self.l2p.unpin(group_of(lba));
        match found {
            Some(pba) => self.read_block(pba, ReadPurpose::User { request, index }),
            None => self.fail_read_block(request, EngineError::UnmappedLba(lba)),
        }
    }

    fn fail_read_block(&mut self, request: RequestId, e: EngineError) {
        let r = self.requests.get_mut(&request).expect("live request");
        r.error.get_or_insert(e);
        r.remaining -= 1;
        if r.remaining == 0 {
            self.complete_request(request);
        }
    }

    pub(crate) fn start_fetch(&mut self, group: u64, pba: u32) {
        self.read_block(pba, ReadPurpose::Fetch { group });
    }

    fn new_token(&mut self) -> u64 {
        let t = self.next_read;
        self.next_read += 1;
        t
    }

    /// Reads one block, decoding around failed drives when needed.
    pub(crate) fn read_block(&mut self, pba: u32, purpose: ReadPurpose) {
        let p = self.decode_pba(pba);
        let token = self.new_token();
        if self.array.drive(p.drive).is_failed() {
            match self.plan_degraded(pba) {
                Ok((plan, inspected)) => {
                    self.stats.degraded_reads += 1;
                    self.stats.cst_inspected_total += inspected as u64;
                    self.stats.cst_inspected_max = self.stats.cst_inspected_max.max(inspected as u64);
                    self.reads.insert(token, ReadJob { purpose, block: None });
                    self.degraded_jobs.insert(token, plan);
                    let host = (inspected as f64 * self.config.cst_entry_ns).round() as u64;
                    self.schedule(self.now + host, Event::Degraded(token));
                }
                Err(e) => self.read_failed(purpose, e),
            }
            return;
        }
        let rc = self
            .array
            .zone_read(self.now, p.drive, p.zone, p.offset, 1)
            .expect("read of a mapped block");
        self.reads.insert(
            token,
            ReadJob {
                purpose,
                block: rc.blocks.into_iter().next(),
            },
        );
        self.schedule(rc.completes_at, Event::Read(token));
    }

    fn read_failed(&mut self, purpose: ReadPurpose, e: EngineError) {
        match purpose {
            ReadPurpose::User { request, .. } => self.fail_read_block(request, e),
            ReadPurpose::Fetch { group } => {
                // every waiter on the group fails with it
                let waiters = self.fetching.remove(&group).unwrap_or_default();
                for w in waiters {
                    match w {
                        Waiter::Lookup { request, lba, .. } => {
                            self.l2p.unpin(group_of(lba));
                            self.fail_read_block(request, e.clone());
                        }
                        Waiter::Index { .. } => panic!("cannot index while the L2P group is unreadable: {e}"),
                    }
                }
            }
            ReadPurpose::Gc { .. } => {
                if let Some(run) = self.gc.as_mut() {
                    run.reads -= 1;
                }
            }
        }
    }

    /// Locates the surviving chunks of the stripe holding `pba`. Returns the
    /// plan and the number of stripe table entries inspected.
    fn plan_degraded(&self, pba: u32) -> Result<(DegradedPlan, usize), EngineError> {
        let p = self.decode_pba(pba);
        let sid = self.owner[p.drive][p.zone as usize].expect("owned zone");
        let seg = &self.segments[&sid];
        let g = seg.desc.geometry;
        let c = g.chunk_blocks;
        let slot = g.slot_of(p.offset)?;
        let row = (p.offset - g.data_start()) % c;
        let failed = self.array.failed_drives();
        let alive: Vec<usize> = (0..self.scheme.width()).filter(|d| !failed.contains(d)).collect();
        let zones = &seg.desc.zone_ids;

        let append = seg.desc.mode == WriteMode::ZoneAppend && seg.cst.is_some();
        let (seq, chunks, inspected) = if !append {
            let chunks: Vec<(usize, u32)> = alive.iter().map(|&d| (d, slot)).collect();
            (slot, chunks, 0)
        } else {
            let cst = seg.cst.as_ref().expect("append segment");
            let id = cst.lookup(p.drive, slot).ok_or(EngineError::TooManyFailures)?;
            let group = slot / g.group_size;
            let seq = group * g.group_size + id;
            let range = g.group_slots(group);
            let mut found = Vec::new();
            let mut inspected = 0;
            for &d in &alive {
                let s = cst.scan(range, &[d], id);
                inspected += s.inspected;
                found.extend(s.found);
                let positions: Vec<usize> = found
                    .iter()
                    .map(|&(d, _)| position_of_drive(&self.scheme, seq, d))
                    .collect();
                if self.scheme.choose_survivors(&positions).is_some() {
                    break;
                }
            }
            (seq, found, inspected)
        };
        let positions: Vec<usize> = chunks
            .iter()
            .map(|&(d, _)| position_of_drive(&self.scheme, seq, d))
            .collect();
        let pick = self
            .scheme
            .choose_survivors(&positions)
            .ok_or(EngineError::TooManyFailures)?;
        let survivors = pick
            .iter()
            .map(|&pos| {
                let (d, s) = chunks[positions.iter().position(|&q| q == pos).expect("picked")];
                (pos, d, zones[d], g.slot_offset(s) + row)
            })
            .collect();
        Ok((
            DegradedPlan {
                wanted: position_of_drive(&self.scheme, seq, p.drive),
                survivors,
            },
            inspected,
        ))
    }

    pub(crate) fn on_degraded_issue(&mut self, token: u64) {
        let plan = self.degraded_jobs.remove(&token).expect("plan");
        let mut done = self.now;
        let mut blocks: Vec<(usize, StoredBlock)> = Vec::new();
        for &(pos, d, z, off) in &plan.survivors {
            let rc = self.array.zone_read(self.now, d, z, off, 1).expect("survivor read");
            done = done.max(rc.completes_at);
            blocks.push((pos, rc.blocks.into_iter().next().expect("one block")));
        }
        let refs: Vec<(usize, &StoredBlock)> = blocks.iter().map(|(p, b)| (*p, b)).collect();
        match reconstruct_block(&self.scheme, plan.wanted, &refs) {
            Ok(b) => {
                self.reads.get_mut(&token).expect("job").block = Some(b);
                self.schedule(done, Event::Read(token));
            }
            Err(e) => {
                let job = self.reads.remove(&token).expect("job");
                self.read_failed(job.purpose, e);
            }
        }
    }

    pub(crate) fn on_read_done(&mut self, token: u64) {
        let job = self.reads.remove(&token).expect("read job");
        let block = job.block.expect("read data");
        match job.purpose {
            ReadPurpose::User { request, index } => {
                debug_assert!(
                    Oob::decode(&block.oob).ok().flatten().is_some_and(|o| {
                        o.meta.lba / BLOCK_SIZE as u64 == self.requests[&request].lba + index as u64
                    }),
                    "L2P entry points at a block of another LBA"
                );
                self.stats.user_read_blocks += 1;
                let r = self.requests.get_mut(&request).expect("live request");
                r.data[index] = block.payload;
                r.remaining -= 1;
                if r.remaining == 0 {
                    self.complete_request(request);
                }
            }
            ReadPurpose::Fetch { group } => {
                self.l2p.install(group, parse_group(&block.bytes()[..]));
                for w in self.fetching.remove(&group).unwrap_or_default() {
                    self.run_waiter(w);
                }
            }
            ReadPurpose::Gc { source } => self.on_gc_read(source, block),
        }
    }
}
