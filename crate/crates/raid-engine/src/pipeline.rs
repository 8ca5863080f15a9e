//! Dispatch, stripe assembly, routing, issue and segment lifecycle.

use std::collections::BTreeSet;

use erasure_codec::encode_lane;
use l2p_index::{group_of, Ensure};
use segment_layout::{
    drive_of_position, serialize_footer, serialize_header, BlockKind, BlockMeta, CompactStripeTable, SegmentClass,
    SegmentDescriptor, SegmentState, WriteMode, INVALID_LBA,
};
use zns_device::{CommandId, StoredBlock, BLOCK_SIZE};

use crate::codec::{build_oob, encode_row, special_oob};
use crate::volume::{DataBlock, Event, Msg, Origin, Phase, Segment, Stripe, Tag, Volume};
use crate::{Payload, Pba, RequestId};

impl Volume {
    pub(crate) fn stripe_blocks(&self, class: usize) -> usize {
        self.scheme.k * self.config.chunk_blocks(Volume::class_of(class)) as usize
    }

    /// Splits a write into blocks, stamps them and packs them into the
    /// class buffer chosen by request size.
    pub(crate) fn dispatch_write(&mut self, id: RequestId, data: Vec<Payload>) {
        let lba0 = self.requests[&id].lba;
        let bytes = data.len() as u64 * BLOCK_SIZE as u64;
        let class = if bytes < self.config.chunk_large_bytes as u64 {
            SegmentClass::Small
        } else {
            SegmentClass::Large
        };
        let class = Volume::class_index(self.effective_class(class));
        self.stats.user_write_blocks += data.len() as u64;
        self.stats.gc.user_blocks += data.len() as u64;
        for (i, payload) in data.into_iter().enumerate() {
            let lba = lba0 + i as u64;
            let ts = self.alloc_ts();
            let p = self.pending.entry(lba).or_default();
            p.count += 1;
            p.max_dispatched = ts;
            self.pin_and_prefetch(group_of(lba));
            self.push_block(
                class,
                DataBlock {
                    payload,
                    lba: lba * BLOCK_SIZE as u64,
                    ts,
                    origin: Origin::User(id),
                },
            );
        }
    }

    /// Pins a group and starts loading it if it lives on the device.
    pub(crate) fn pin_and_prefetch(&mut self, group: u64) {
        self.l2p.pin(group);
        if let Ensure::Fetch(pba) = self.l2p.ensure(group) {
            if let std::collections::hash_map::Entry::Vacant(e) = self.fetching.entry(group) {
                e.insert(Vec::new());
                self.start_fetch(group, pba);
            }
        }
    }

    pub(crate) fn push_block(&mut self, class: usize, block: DataBlock) {
        if self.buffers[class].blocks.is_empty() {
            let epoch = self.buffers[class].epoch;
            let at = self.now + zns_device::us_to_ns(self.config.fill_timeout_us);
            self.schedule(at, Event::FillTimeout { class, epoch });
        }
        self.buffers[class].blocks.push(block);
        if self.buffers[class].blocks.len() == self.stripe_blocks(class) {
            self.seal_buffer(class);
        }
    }

    pub(crate) fn on_fill_timeout(&mut self, class: usize, epoch: u64) {
        if self.buffers[class].epoch == epoch && !self.buffers[class].blocks.is_empty() {
            self.seal_buffer(class);
        }
    }

    /// Turns the class buffer into a stripe, padding with zero blocks.
    fn seal_buffer(&mut self, class: usize) {
        let want = self.stripe_blocks(class);
        let buf = &mut self.buffers[class];
        buf.epoch += 1;
        let mut blocks = std::mem::take(&mut buf.blocks);
        let fills = want - blocks.len();
        blocks.extend((0..fills).map(|_| DataBlock {
            payload: None,
            lba: INVALID_LBA,
            ts: 0,
            origin: Origin::Fill,
        }));
        self.stats.fill_blocks += fills as u64;
        let n = self.scheme.width();
        let id = self.next_stripe;
        self.next_stripe += 1;
        self.stripes.insert(
            id,
            Stripe {
                blocks,
                segment: u32::MAX,
                seq: 0,
                offsets: vec![None; n],
                metas: Vec::new(),
                pending: 0,
            },
        );
        let slot = self.route(Volume::class_of(class));
        self.slots[slot].queue.push_back(id);
        self.pump_slot(slot);
    }

    fn slot_idle(&self, i: usize) -> bool {
        let s = &self.slots[i];
        s.queue.is_empty()
            && s.segment.is_some_and(|id| {
                let seg = &self.segments[&id];
                seg.phase == Phase::Active && seg.inflight.is_empty()
            })
    }

    /// Picks the routing slot for a sealed stripe.
    fn route(&mut self, class: SegmentClass) -> usize {
        let c = Volume::class_index(class);
        let of_class: Vec<usize> = (0..self.slots.len())
            .filter(|&i| self.slots[i].spec.class == class)
            .collect();
        let append = of_class
            .iter()
            .copied()
            .find(|&i| self.slots[i].spec.mode == WriteMode::ZoneAppend);
        let hybrid_small =
            class == SegmentClass::Small && self.config.layout == crate::LayoutMode::Hybrid && append.is_some();
        if hybrid_small {
            let zw: Vec<usize> = of_class
                .iter()
                .copied()
                .filter(|&i| self.slots[i].spec.mode == WriteMode::ZoneWrite)
                .collect();
            for j in 0..zw.len() {
                let i = zw[(self.rr[c] + j) % zw.len()];
                if self.slot_idle(i) {
                    self.rr[c] = (self.rr[c] + j + 1) % zw.len();
                    return i;
                }
            }
            return append.expect("hybrid small");
        }
        let i = of_class[self.rr[c] % of_class.len()];
        self.rr[c] = (self.rr[c] + 1) % of_class.len();
        i
    }

    /// Issues queued stripes of a slot as far as segment state allows.
    pub(crate) fn pump_slot(&mut self, slot: usize) {
        while let Some(&stripe) = self.slots[slot].queue.front() {
            let Some(sid) = self.slots[slot].segment else {
                return;
            };
            let seg = &self.segments[&sid];
            if seg.phase != Phase::Active {
                return;
            }
            let g = seg.desc.geometry;
            let seq = seg.next_seq;
            let same_group = seg.inflight.iter().all(|&s| g.group_of_seq(s) == g.group_of_seq(seq));
            if !same_group {
                return;
            }
            self.slots[slot].queue.pop_front();
            self.issue_stripe(stripe, sid);
            let seg = self.segments.get_mut(&sid).expect("segment");
            if seg.next_seq == g.stripes {
                seg.phase = Phase::Draining;
                seg.slot = None;
                self.slots[slot].segment = None;
                self.open_segment_for_slot(slot);
            }
        }
    }

    fn issue_stripe(&mut self, id: u64, sid: u32) {
        let scheme = self.scheme;
        let (k, n) = (scheme.k, scheme.width());
        let seg = self.segments.get_mut(&sid).expect("segment");
        let seq = seg.next_seq;
        seg.next_seq += 1;
        seg.inflight.insert(seq);
        let desc = seg.desc.clone();
        let c = desc.chunk_blocks() as usize;
        let stripe = self.stripes.get_mut(&id).expect("stripe");
        stripe.segment = sid;
        stripe.seq = seq;
        stripe.pending = n;

        // chunk[p][r]: block r of position p
        let mut chunks: Vec<Vec<StoredBlock>> = vec![Vec::with_capacity(c); n];
        let mut metas: Vec<Vec<BlockMeta>> = vec![Vec::with_capacity(c); n];
        for r in 0..c {
            let row: Vec<&DataBlock> = (0..k).map(|p| &stripe.blocks[p * c + r]).collect();
            let payloads: Vec<&Payload> = row.iter().map(|b| &b.payload).collect();
            let parity = encode_row(&scheme, &payloads);
            let lbas: Vec<u64> = row.iter().map(|b| b.lba).collect();
            let tss: Vec<u64> = row.iter().map(|b| b.ts).collect();
            let plba = encode_lane(&scheme, &lbas);
            let pts = encode_lane(&scheme, &tss);
            for (p, b) in row.iter().enumerate() {
                let meta = BlockMeta::new(b.lba, b.ts, seq);
                let oob = build_oob(meta, BlockKind::Data, p, sid);
                chunks[p].push(StoredBlock::new(b.payload.clone(), oob));
                metas[p].push(meta);
            }
            for (j, payload) in parity.into_iter().enumerate() {
                let meta = BlockMeta::new(plba[j], pts[j], seq);
                let oob = build_oob(meta, BlockKind::Parity, k + j, sid);
                chunks[k + j].push(StoredBlock::new(payload, oob));
                metas[k + j].push(meta);
            }
        }
        // store metas by drive
        let mut by_drive = vec![Vec::new(); n];
        for (p, m) in metas.into_iter().enumerate() {
            by_drive[drive_of_position(&scheme, seq, p)] = m;
        }
        stripe.metas = by_drive;

        for (p, blocks) in chunks.into_iter().enumerate() {
            let drive = drive_of_position(&scheme, seq, p);
            let zone = desc.zone_ids[drive];
            let ev = match desc.mode {
                WriteMode::ZoneWrite => {
                    let off = desc.geometry.slot_offset(seq);
                    self.array.zone_write(self.now, drive, zone, off, blocks)
                }
                WriteMode::ZoneAppend => self.array.zone_append(self.now, drive, zone, blocks),
            }
            .expect("stripe write on a healthy drive");
            self.track(drive, ev.command, ev.completes_at, Tag::Chunk { stripe: id, drive });
        }
    }

    fn track(&mut self, drive: usize, command: CommandId, at: u64, tag: Tag) {
        self.commands.insert((drive, command), tag);
        self.schedule(at, Event::Device { drive, command });
    }

    pub(crate) fn on_device_completion(&mut self, drive: usize, command: CommandId) {
        let ev = self.array.complete(drive, command).expect("tracked command");
        match self.commands.remove(&(drive, command)).expect("tracked") {
            Tag::Chunk { stripe, drive } => {
                let s = self.stripes.get_mut(&stripe).expect("stripe");
                s.offsets[drive] = Some(ev.offset);
                s.pending -= 1;
                let (sid, seq, done) = (s.segment, s.seq, s.pending == 0);
                let metas = std::mem::take(&mut s.metas[drive]);
                let seg = self.segments.get_mut(&sid).expect("segment");
                let g = seg.desc.geometry;
                let rel = (ev.offset - g.data_start()) as usize;
                let fm = &mut seg.footer_meta[drive];
                if fm.len() < rel + metas.len() {
                    fm.resize(rel + metas.len(), BlockMeta::default());
                }
                fm[rel..rel + metas.len()].copy_from_slice(&metas);
                if let Some(cst) = seg.cst.as_mut() {
                    let slot = g.slot_of(ev.offset).expect("data region");
                    cst.set(drive, slot, seq % g.group_size).expect("id below group size");
                }
                if done {
                    self.msgs.push_back(Msg::StripePersisted(stripe));
                }
            }
            Tag::Header { segment } => {
                let seg = self.segments.get_mut(&segment).expect("segment");
                seg.pending_ops -= 1;
                if seg.pending_ops == 0 {
                    seg.phase = Phase::Active;
                    self.msgs.push_back(Msg::SegmentReady(segment));
                }
            }
            Tag::Footer { segment } => {
                let seg = self.segments.get_mut(&segment).expect("segment");
                seg.pending_ops -= 1;
                if seg.pending_ops == 0 {
                    let zones = seg.desc.zone_ids.clone();
                    seg.phase = Phase::Sealed;
                    seg.desc.state = SegmentState::Sealed;
                    seg.footer_meta = Vec::new();
                    for (d, z) in zones.into_iter().enumerate() {
                        self.array.zone_finish(d, z).expect("finish sealed zone");
                    }
                    self.stats.segments_sealed += 1;
                }
            }
        }
    }

    /// Lowest free zone on every drive, or `None` if a drive has none.
    fn take_zones(&mut self) -> Option<Vec<u32>> {
        if self.free_zones.iter().any(|f| f.is_empty()) {
            return None;
        }
        Some(
            self.free_zones
                .iter_mut()
                .map(|f| f.pop_first().expect("non-empty"))
                .collect(),
        )
    }

    /// Opens a fresh segment for a slot and writes its header. Leaves the
    /// slot empty when zones run out; it is retried after a reset.
    pub(crate) fn open_segment_for_slot(&mut self, slot: usize) {
        if !self.array.failed_drives().is_empty() {
            return;
        }
        let Some(zones) = self.take_zones() else {
            return;
        };
        let spec = self.slots[slot].spec;
        let geometry = self.config.segment_geometry(self.array.geometry(), &spec);
        let id = self.next_segment_id;
        self.next_segment_id += 1;
        let n = self.scheme.width();
        for (d, &z) in zones.iter().enumerate() {
            self.owner[d][z as usize] = Some(id);
        }
        let desc = SegmentDescriptor {
            segment_id: id,
            zone_ids: zones,
            state: SegmentState::Open,
            scheme: self.scheme,
            geometry,
            mode: spec.mode,
            class: spec.class,
        };
        self.validity.register(id, n * geometry.data_blocks() as usize);
        let cst = (spec.mode == WriteMode::ZoneAppend && geometry.group_size > 1)
            .then(|| CompactStripeTable::new(n, &geometry).expect("group size above one"));
        let pages = serialize_header(&desc);
        for d in 0..n {
            let blocks = pages
                .iter()
                .map(|p| StoredBlock::new(Some(p.clone()), special_oob(BlockKind::Header, id)).compact())
                .collect();
            let ev = self
                .array
                .zone_write(self.now, d, desc.zone_ids[d], 0, blocks)
                .expect("header write to an empty zone");
            self.track(d, ev.command, ev.completes_at, Tag::Header { segment: id });
        }
        self.segments.insert(
            id,
            Segment {
                desc,
                phase: Phase::Opening,
                slot: Some(slot),
                next_seq: 0,
                inflight: BTreeSet::new(),
                pending_ops: n as u32,
                cst,
                footer_meta: vec![Vec::new(); n],
            },
        );
        self.slots[slot].segment = Some(id);
        self.stats.segments_opened += 1;
    }

    pub(crate) fn retry_slots(&mut self) {
        for i in 0..self.slots.len() {
            if self.slots[i].segment.is_none() {
                self.open_segment_for_slot(i);
            }
        }
    }

    /// Continues whatever a segment was waiting on.
    pub(crate) fn pump_segment(&mut self, id: u32) {
        let Some(seg) = self.segments.get(&id) else {
            return;
        };
        if let Some(slot) = seg.slot {
            self.pump_slot(slot);
        }
        self.maybe_seal(id);
    }

    /// Writes the footer once every stripe of a full segment is durable.
    fn maybe_seal(&mut self, id: u32) {
        let seg = &self.segments[&id];
        if seg.phase != Phase::Draining || !seg.inflight.is_empty() {
            return;
        }
        let g = seg.desc.geometry;
        let zones = seg.desc.zone_ids.clone();
        let metas = seg.footer_meta.clone();
        for (d, z) in zones.into_iter().enumerate() {
            assert_eq!(
                metas[d].len(),
                g.data_blocks() as usize,
                "footer covers the data region"
            );
            let blocks = serialize_footer(&metas[d])
                .into_iter()
                .map(|p| StoredBlock::new(Some(p), special_oob(BlockKind::Footer, id)))
                .collect();
            let ev = self
                .array
                .zone_write(self.now, d, z, g.data_end(), blocks)
                .expect("footer write");
            self.track(d, ev.command, ev.completes_at, Tag::Footer { segment: id });
        }
        let seg = self.segments.get_mut(&id).expect("segment");
        seg.pending_ops = zones_len(&seg.desc);
        seg.phase = Phase::Sealing;
    }

    /// Address of data block `i` of a persisted stripe.
    pub(crate) fn block_pba(&self, stripe: &Stripe, i: usize) -> u32 {
        let seg = &self.segments[&stripe.segment];
        let c = seg.desc.chunk_blocks() as usize;
        let drive = drive_of_position(&self.scheme, stripe.seq, i / c);
        let off = stripe.offsets[drive].expect("persisted") + (i % c) as u32;
        self.encode_pba(Pba {
            drive,
            zone: seg.desc.zone_ids[drive],
            offset: off,
        })
    }
}

fn zones_len(d: &SegmentDescriptor) -> u32 {
    d.zone_ids.len() as u32
}
