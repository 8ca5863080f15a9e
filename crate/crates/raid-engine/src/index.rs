//! Indexing stage: applies persisted stripes to the L2P table and the
//! validity bitmaps, acknowledges writes and persists evicted groups.

use l2p_index::{group_of, Ensure};
use segment_layout::mapping_lba;
use zns_device::{page_from_slice, BLOCK_SIZE};

use crate::volume::{DataBlock, Msg, Origin, Volume, Waiter};

impl Volume {
    pub(crate) fn on_stripe_persisted(&mut self, id: u64) {
        let stripe = self.stripes.remove(&id).expect("stripe");
        let sid = stripe.segment;
        let data_blocks = stripe.blocks.len() as u64;
        {
            let seg = self.segments.get_mut(&sid).expect("segment");
            seg.inflight.remove(&stripe.seq);
        }
        self.validity.mark_written(sid, data_blocks).expect("registered");
        self.stats.stripes_persisted += 1;
        for i in 0..stripe.blocks.len() {
            let b = &stripe.blocks[i];
            if b.origin == Origin::Fill {
                continue;
            }
            let pba = self.block_pba(&stripe, i);
            match b.origin {
                Origin::User(_) | Origin::Gc { .. } => {
                    let lba = b.lba / BLOCK_SIZE as u64;
                    let w = Waiter::Index {
                        lba,
                        ts: b.ts,
                        origin: b.origin,
                        pba,
                    };
                    self.when_resident(group_of(lba), w);
                }
                Origin::Mapping { group, generation } => match self.l2p.mapping_persisted(group, generation, pba) {
                    Some(stale) => self.mark_stale(stale),
                    None => self.mark_valid(pba),
                },
                Origin::MappingCopy { group, source } => {
                    if self.l2p.relocate_mapping(group, source, pba) {
                        self.mark_valid(pba);
                        self.mark_stale(source);
                    }
                }
                Origin::Fill => unreachable!(),
            }
        }
        self.msgs.push_back(Msg::SegmentReady(sid));
    }

    /// Runs `w` now if its group is resident, else after the fetch.
    pub(crate) fn when_resident(&mut self, group: u64, w: Waiter) {
        if let Some(waiters) = self.fetching.get_mut(&group) {
            waiters.push(w);
            return;
        }
        match self.l2p.ensure(group) {
            Ensure::Resident => self.run_waiter(w),
            Ensure::Fetch(pba) => {
                self.fetching.insert(group, vec![w]);
                self.start_fetch(group, pba);
            }
        }
    }

    pub(crate) fn run_waiter(&mut self, w: Waiter) {
        match w {
            Waiter::Index { lba, ts, origin, pba } => self.apply_index(lba, ts, origin, pba),
            Waiter::Lookup { request, index, lba } => self.resolve_read(request, index, lba),
        }
    }

    fn apply_index(&mut self, lba: u64, ts: u64, origin: Origin, pba: u32) {
        let group = group_of(lba);
        match origin {
            Origin::User(req) => {
                let p = self.pending.get_mut(&lba).expect("pending write");
                p.count -= 1;
                let newest = ts > p.max_applied;
                if newest {
                    p.max_applied = ts;
                }
                if p.count == 0 {
                    self.pending.remove(&lba);
                }
                if newest {
                    self.set_entry(lba, pba);
                }
                self.l2p.unpin(group);
                let r = self.requests.get_mut(&req).expect("live request");
                r.remaining -= 1;
                if r.remaining == 0 {
                    self.complete_request(req);
                }
            }
            Origin::Gc { source } => {
                if self.l2p.get(lba) == Some(source) {
                    self.set_entry(lba, pba);
                }
                self.l2p.unpin(group);
            }
            _ => unreachable!("only data blocks wait for their group"),
        }
    }

    fn set_entry(&mut self, lba: u64, pba: u32) {
        let out = self.l2p.set(lba, pba);
        if let Some(old) = out.old {
            self.mark_stale(old);
        }
        if let Some(m) = out.stale_mapping {
            self.mark_stale(m);
        }
        self.mark_valid(pba);
    }

    pub(crate) fn mark_valid(&mut self, pba: u32) {
        if let Some((seg, slot)) = self.validity_slot(pba) {
            self.validity.mark_valid(seg, slot).expect("registered");
        }
    }

    pub(crate) fn mark_stale(&mut self, pba: u32) {
        if let Some((seg, slot)) = self.validity_slot(pba) {
            self.validity.mark_stale(seg, slot).expect("registered");
        }
    }

    /// Evicts L2P groups over the cap and queues their mapping blocks.
    /// Skipped while degraded, since new stripes cannot be written.
    pub(crate) fn evict_if_needed(&mut self) {
        if !self.array.failed_drives().is_empty() {
            return;
        }
        let wbs = self.l2p.evict_if_needed();
        if wbs.is_empty() {
            return;
        }
        let class = Volume::class_index(self.effective_class(segment_layout::SegmentClass::Small));
        for wb in wbs {
            let ts = self.alloc_ts();
            self.stats.mapping_blocks += 1;
            self.push_block(
                class,
                DataBlock {
                    payload: Some(page_from_slice(&wb.block[..])),
                    lba: mapping_lba(wb.group),
                    ts,
                    origin: Origin::Mapping {
                        group: wb.group,
                        generation: wb.generation,
                    },
                },
            );
        }
    }
}
