//! Cleaning stage: picks a victim, rewrites its live blocks through the
//! stripe path and resets its zones once nothing in it is live.

use garbage_collector::Candidate;
use l2p_index::group_of;
use segment_layout::{is_mapping_lba, mapping_group_of, Oob, SegmentClass};
use zns_device::{StoredBlock, BLOCK_SIZE};

use crate::volume::{DataBlock, GcRun, Msg, Origin, Phase, ReadPurpose, Volume};
use crate::Pba;

impl Volume {
    pub(crate) fn gc_tick(&mut self) {
        if !self.array.failed_drives().is_empty() {
            return;
        }
        if self.gc.is_none() {
            self.gc = self.next_victim().map(|victim| {
                self.stats.gc.runs += 1;
                GcRun {
                    victim,
                    todo: self.validity.valid_blocks(victim).into(),
                    reads: 0,
                }
            });
        }
        let Some(run) = self.gc.as_ref() else {
            return;
        };
        let victim = run.victim;
        let desc = self.segments[&victim].desc.clone();
        let per_drive = desc.geometry.data_blocks() as usize;
        while let Some(run) = self.gc.as_mut() {
            if run.reads >= self.config.gc_max_reads {
                break;
            }
            let Some(idx) = run.todo.pop_front() else {
                break;
            };
            if !self.validity.is_valid(victim, idx) {
                continue;
            }
            run.reads += 1;
            let drive = idx / per_drive;
            let pba = self.encode_pba(Pba {
                drive,
                zone: desc.zone_ids[drive],
                offset: desc.geometry.data_start() + (idx % per_drive) as u32,
            });
            self.read_block(pba, ReadPurpose::Gc { source: pba });
        }
        let run = self.gc.as_ref().expect("active run");
        if run.todo.is_empty() && run.reads == 0 && self.validity.valid(victim) == 0 {
            self.reset_segment(victim);
            self.gc = None;
            self.msgs.push_back(Msg::SpaceChanged);
        }
    }

    fn next_victim(&mut self) -> Option<u32> {
        while let Some(id) = self.relocations.pop_front() {
            if self.segments.contains_key(&id) {
                return Some(id);
            }
        }
        let total = self.array.geometry().num_zones;
        if !self.policy.should_collect(self.free_zones(), total) {
            return None;
        }
        let candidates: Vec<Candidate> = self
            .segments
            .values()
            .map(|s| Candidate {
                segment: s.desc.segment_id,
                sealed: s.phase == Phase::Sealed,
                stale: self.validity.stale(s.desc.segment_id),
            })
            .collect();
        self.policy.select_victim(candidates).ok()
    }

    fn reset_segment(&mut self, id: u32) {
        let seg = self.segments.remove(&id).expect("victim");
        for (d, &z) in seg.desc.zone_ids.iter().enumerate() {
            self.array.zone_reset(d, z).expect("reset victim zone");
            self.owner[d][z as usize] = None;
            self.free_zones[d].insert(z);
            self.stats.gc.zones_reset += 1;
        }
        self.validity.remove(id);
    }

    pub(crate) fn on_gc_read(&mut self, source: u32, block: StoredBlock) {
        if let Some(run) = self.gc.as_mut() {
            run.reads -= 1;
        }
        let live = self
            .validity_slot(source)
            .is_some_and(|(s, i)| self.validity.is_valid(s, i));
        if !live {
            return;
        }
        let oob = Oob::decode(&block.oob)
            .expect("intact out-of-band area")
            .expect("written block");
        let lba = oob.meta.lba;
        if is_mapping_lba(lba) {
            let group = mapping_group_of(lba);
            if !self.l2p.mapping_is_current(group, source) {
                return;
            }
            let class = Volume::class_index(self.effective_class(SegmentClass::Small));
            self.count_gc_copy();
            self.push_block(
                class,
                DataBlock {
                    payload: block.payload,
                    lba,
                    ts: oob.meta.timestamp,
                    origin: Origin::MappingCopy { group, source },
                },
            );
            return;
        }
        let lba_block = lba / BLOCK_SIZE as u64;
        if self
            .pending
            .get(&lba_block)
            .is_some_and(|p| p.max_dispatched > p.max_applied)
        {
            // a newer write will stale the source on its own
            return;
        }
        self.pin_and_prefetch(group_of(lba_block));
        let ts = self.alloc_ts();
        let class = Volume::class_index(self.effective_class(SegmentClass::Large));
        self.count_gc_copy();
        self.push_block(
            class,
            DataBlock {
                payload: block.payload,
                lba,
                ts,
                origin: Origin::Gc { source },
            },
        );
    }

    fn count_gc_copy(&mut self) {
        self.stats.gc.gc_blocks += 1;
        self.stats.gc.blocks_moved += 1;
    }
}
