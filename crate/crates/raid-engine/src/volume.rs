use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use erasure_codec::RaidScheme;
use garbage_collector::{GcPolicy, GcStats, ValidityTracker};
use l2p_index::L2pIndex;
use segment_layout::{BlockMeta, CompactStripeTable, SegmentClass, SegmentDescriptor, SegmentState};
use zns_device::{CommandId, DeviceArray, SimTime, StoredBlock};

use crate::config::{SlotSpec, VolumeConfig};
use crate::{EngineError, Payload, Pba};

pub type RequestId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Write,
    Read,
}

/// A finished user request. Reads carry one payload per block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub id: RequestId,
    pub kind: RequestKind,
    pub lba: u64,
    pub blocks: u32,
    pub submitted_at: SimTime,
    pub completed_at: SimTime,
    pub data: Vec<Payload>,
    pub error: Option<EngineError>,
}

impl Completion {
    pub fn latency(&self) -> SimTime {
        self.completed_at - self.submitted_at
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub write_requests: u64,
    pub read_requests: u64,
    pub user_write_blocks: u64,
    pub user_read_blocks: u64,
    pub fill_blocks: u64,
    pub mapping_blocks: u64,
    pub stripes_persisted: u64,
    pub segments_opened: u64,
    pub segments_sealed: u64,
    pub degraded_reads: u64,
    pub cst_inspected_max: u64,
    pub cst_inspected_total: u64,
    pub l2p_fetch_reads: u64,
    pub gc: GcStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Header write in flight.
    Opening,
    Active,
    /// Every stripe slot handed out; waiting for the last stripes.
    Draining,
    /// Footer write in flight.
    Sealing,
    Sealed,
}

/// Read-only view of a segment for inspection and drive rebuild.
#[derive(Clone, Copy, Debug)]
pub struct SegmentView<'a> {
    pub descriptor: &'a SegmentDescriptor,
    pub phase: Phase,
    pub next_seq: u32,
    pub cst: Option<&'a CompactStripeTable>,
}

/// One segment as reconstructed after a crash.
#[derive(Clone, Debug)]
pub struct RecoveredSegment {
    pub descriptor: SegmentDescriptor,
    /// Stripes present; for a resumed segment also the next sequence.
    pub next_seq: u32,
    pub cst: Option<CompactStripeTable>,
    /// Footer entries of data-region blocks, per drive, for open segments.
    pub footer_meta: Vec<Vec<BlockMeta>>,
    /// Data-region blocks written (live or not).
    pub written_blocks: u64,
    /// Move the live blocks elsewhere and reset the zones.
    pub relocate: bool,
}

#[derive(Clone, Debug)]
pub struct RecoveredState {
    pub segments: Vec<RecoveredSegment>,
    pub l2p: L2pIndex,
    /// Every block the L2P table or the mapping directory points at.
    pub live_pbas: Vec<u32>,
    pub next_timestamp: u64,
    pub next_segment_id: u32,
    pub now: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Origin {
    User(RequestId),
    Gc { source: u32 },
    Mapping { group: u64, generation: u64 },
    MappingCopy { group: u64, source: u32 },
    Fill,
}

#[derive(Clone, Debug)]
pub(crate) struct DataBlock {
    pub payload: Payload,
    /// Byte address stored in block metadata.
    pub lba: u64,
    pub ts: u64,
    pub origin: Origin,
}

#[derive(Clone, Debug)]
pub(crate) struct Stripe {
    pub blocks: Vec<DataBlock>,
    pub segment: u32,
    pub seq: u32,
    /// Chunk offset per drive once known.
    pub offsets: Vec<Option<u32>>,
    /// Footer entries per drive, C each.
    pub metas: Vec<Vec<BlockMeta>>,
    pub pending: usize,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct StripeBuffer {
    pub blocks: Vec<DataBlock>,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub(crate) struct Slot {
    pub spec: SlotSpec,
    pub segment: Option<u32>,
    pub queue: VecDeque<u64>,
}

#[derive(Clone, Debug)]
pub(crate) struct Segment {
    pub desc: SegmentDescriptor,
    pub phase: Phase,
    pub slot: Option<usize>,
    pub next_seq: u32,
    pub inflight: BTreeSet<u32>,
    pub pending_ops: u32,
    pub cst: Option<CompactStripeTable>,
    pub footer_meta: Vec<Vec<BlockMeta>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Tag {
    Chunk { stripe: u64, drive: usize },
    Header { segment: u32 },
    Footer { segment: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ReadPurpose {
    User { request: RequestId, index: usize },
    Fetch { group: u64 },
    Gc { source: u32 },
}

#[derive(Clone, Debug)]
pub(crate) struct ReadJob {
    pub purpose: ReadPurpose,
    pub block: Option<StoredBlock>,
}

/// Survivor chunks to read for one degraded block.
#[derive(Clone, Debug)]
pub(crate) struct DegradedPlan {
    pub wanted: usize,
    /// (stripe position, drive, zone, offset)
    pub survivors: Vec<(usize, usize, u32, u32)>,
}

#[derive(Clone, Debug)]
pub(crate) enum Event {
    Device { drive: usize, command: CommandId },
    Read(u64),
    Degraded(u64),
    FillTimeout { class: usize, epoch: u64 },
}

/// Messages between pipeline stages.
#[derive(Clone, Debug)]
pub(crate) enum Msg {
    StripePersisted(u64),
    SegmentReady(u32),
    SpaceChanged,
}

#[derive(Clone, Debug)]
pub(crate) struct Request {
    pub kind: RequestKind,
    pub lba: u64,
    pub blocks: u32,
    pub submitted_at: SimTime,
    pub remaining: u32,
    pub data: Vec<Payload>,
    pub error: Option<EngineError>,
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct PendingLba {
    pub count: u32,
    pub max_dispatched: u64,
    pub max_applied: u64,
}

/// Work parked until an L2P group arrives from the device.
#[derive(Clone, Debug)]
pub(crate) enum Waiter {
    Index {
        lba: u64,
        ts: u64,
        origin: Origin,
        pba: u32,
    },
    Lookup {
        request: RequestId,
        index: usize,
        lba: u64,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct GcRun {
    pub victim: u32,
    pub todo: VecDeque<usize>,
    pub reads: usize,
}

/// A RAID volume over a [`DeviceArray`].
pub struct Volume {
    pub(crate) config: VolumeConfig,
    pub(crate) scheme: RaidScheme,
    pub(crate) array: DeviceArray,
    pub(crate) now: SimTime,
    pub(crate) events: BTreeMap<(SimTime, u64), Event>,
    pub(crate) event_seq: u64,
    pub(crate) msgs: VecDeque<Msg>,

    pub(crate) logical_blocks: u64,
    pub(crate) next_ts: u64,
    pub(crate) next_request: RequestId,
    pub(crate) requests: HashMap<RequestId, Request>,
    pub(crate) completions: Vec<Completion>,
    pub(crate) admission: VecDeque<(RequestId, Vec<Payload>)>,
    pub(crate) pending: HashMap<u64, PendingLba>,

    pub(crate) buffers: [StripeBuffer; 2],
    pub(crate) stripes: HashMap<u64, Stripe>,
    pub(crate) next_stripe: u64,
    pub(crate) slots: Vec<Slot>,
    pub(crate) rr: [usize; 2],
    pub(crate) segments: BTreeMap<u32, Segment>,
    pub(crate) next_segment_id: u32,
    pub(crate) owner: Vec<Vec<Option<u32>>>,
    pub(crate) free_zones: Vec<BTreeSet<u32>>,
    pub(crate) commands: HashMap<(usize, CommandId), Tag>,

    pub(crate) l2p: L2pIndex,
    pub(crate) fetching: HashMap<u64, Vec<Waiter>>,
    pub(crate) reads: HashMap<u64, ReadJob>,
    pub(crate) degraded_jobs: HashMap<u64, DegradedPlan>,
    pub(crate) next_read: u64,

    pub(crate) validity: ValidityTracker,
    pub(crate) policy: GcPolicy,
    pub(crate) gc: Option<GcRun>,
    pub(crate) relocations: VecDeque<u32>,
    pub(crate) stats: EngineStats,
}

impl Volume {
    /// Creates an empty volume and opens its first segments. Headers are
    /// written asynchronously; writes submitted meanwhile wait for them.
    pub fn create(config: VolumeConfig, array: DeviceArray) -> Result<Volume, EngineError> {
        let mut v = Volume::blank(config, array)?;
        for i in 0..v.slots.len() {
            v.open_segment_for_slot(i);
        }
        v.drain();
        Ok(v)
    }

    fn blank(config: VolumeConfig, array: DeviceArray) -> Result<Volume, EngineError> {
        let geom = array.geometry().clone();
        config.validate(&geom)?;
        if array.width() != config.scheme.width() {
            return Err(EngineError::Config(format!(
                "{} drives for a {}-wide scheme",
                array.width(),
                config.scheme.width()
            )));
        }
        if !Pba::fits(array.width(), geom.num_zones, geom.zone_capacity_blocks) {
            return Err(EngineError::Config("array too large for 4-byte addresses".into()));
        }
        let logical_blocks = config.logical_blocks(&geom);
        let cap = config.l2p_cap(&geom);
        let policy = GcPolicy::new(config.gc_threshold, config.reserve_zones())
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let n = array.width();
        let slots = config
            .slots()
            .into_iter()
            .map(|spec| Slot {
                spec,
                segment: None,
                queue: VecDeque::new(),
            })
            .collect();
        Ok(Volume {
            scheme: config.scheme,
            now: 0,
            events: BTreeMap::new(),
            event_seq: 0,
            msgs: VecDeque::new(),
            logical_blocks,
            next_ts: 1,
            next_request: 0,
            requests: HashMap::new(),
            completions: Vec::new(),
            admission: VecDeque::new(),
            pending: HashMap::new(),
            buffers: [StripeBuffer::default(), StripeBuffer::default()],
            stripes: HashMap::new(),
            next_stripe: 0,
            slots,
            rr: [0, 0],
            segments: BTreeMap::new(),
            next_segment_id: 0,
            owner: vec![vec![None; geom.num_zones as usize]; n],
            free_zones: vec![(0..geom.num_zones).collect(); n],
            commands: HashMap::new(),
            l2p: L2pIndex::new(logical_blocks, cap),
            fetching: HashMap::new(),
            reads: HashMap::new(),
            degraded_jobs: HashMap::new(),
            next_read: 0,
            validity: ValidityTracker::new(),
            policy,
            gc: None,
            relocations: VecDeque::new(),
            stats: EngineStats::default(),
            config,
            array,
        })
    }

    /// Rebuilds a running volume from recovered on-device state.
    pub fn restore(config: VolumeConfig, array: DeviceArray, state: RecoveredState) -> Result<Volume, EngineError> {
        let mut v = Volume::blank(config, array)?;
        v.now = state.now;
        v.next_ts = state.next_timestamp.max(1);
        v.next_segment_id = state.next_segment_id;
        v.l2p = state.l2p;
        for rs in state.segments {
            let id = rs.descriptor.segment_id;
            for (d, &z) in rs.descriptor.zone_ids.iter().enumerate() {
                v.owner[d][z as usize] = Some(id);
                v.free_zones[d].remove(&z);
            }
            let g = rs.descriptor.geometry;
            v.validity.register(id, v.scheme.width() * g.data_blocks() as usize);
            v.validity.mark_written(id, rs.written_blocks).expect("registered");
            let sealed = rs.descriptor.state == SegmentState::Sealed;
            let mut seg = Segment {
                desc: rs.descriptor,
                phase: if sealed { Phase::Sealed } else { Phase::Active },
                slot: None,
                next_seq: rs.next_seq,
                inflight: BTreeSet::new(),
                pending_ops: 0,
                cst: rs.cst,
                footer_meta: rs.footer_meta,
            };
            if !sealed && !rs.relocate {
                let slot = v.slots.iter().position(|s| {
                    s.segment.is_none()
                        && s.spec.class == seg.desc.class
                        && s.spec.mode == seg.desc.mode
                        && s.spec.chunk_blocks == g.chunk_blocks
                });
                match slot {
                    Some(i) if seg.next_seq < g.stripes => {
                        v.slots[i].segment = Some(id);
                        seg.slot = Some(i);
                    }
                    _ => v.relocations.push_back(id),
                }
            }
            if rs.relocate {
                seg.phase = Phase::Sealed;
                v.relocations.push_back(id);
            } else if !sealed && seg.slot.is_none() {
                // no slot for it: treat like a dirty segment
                seg.phase = Phase::Sealed;
            }
            v.segments.insert(id, seg);
        }
        for pba in state.live_pbas {
            let (seg, vslot) = v.validity_slot(pba).expect("live block in a known segment");
            v.validity.mark_valid(seg, vslot).expect("registered");
        }
        for i in 0..v.slots.len() {
            if v.slots[i].segment.is_none() {
                v.open_segment_for_slot(i);
            }
        }
        v.msgs.push_back(Msg::SpaceChanged);
        v.drain();
        Ok(v)
    }

    pub fn config(&self) -> &VolumeConfig {
        &self.config
    }

    pub fn scheme(&self) -> RaidScheme {
        self.scheme
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn logical_blocks(&self) -> u64 {
        self.logical_blocks
    }

    pub fn array(&self) -> &DeviceArray {
        &self.array
    }

    pub fn array_mut(&mut self) -> &mut DeviceArray {
        &mut self.array
    }

    pub fn into_array(self) -> DeviceArray {
        self.array
    }

    pub fn stats(&self) -> EngineStats {
        let mut s = self.stats;
        s.l2p_fetch_reads = self.l2p.stats().fetches;
        s
    }

    pub fn l2p(&self) -> &L2pIndex {
        &self.l2p
    }

    pub fn validity(&self) -> &ValidityTracker {
        &self.validity
    }

    pub fn next_timestamp(&self) -> u64 {
        self.next_ts
    }

    /// A cleaning run has picked a victim and not yet reset it.
    pub fn gc_active(&self) -> bool {
        self.gc.is_some()
    }

    pub fn free_zones(&self) -> u32 {
        self.free_zones.iter().map(|f| f.len()).min().unwrap_or(0) as u32
    }

    pub fn cst_memory_bytes(&self) -> usize {
        self.segments
            .values()
            .filter_map(|s| s.cst.as_ref())
            .map(|c| c.memory_bytes())
            .sum()
    }

    pub fn segment_views(&self) -> Vec<SegmentView<'_>> {
        self.segments.values().map(|s| s.view()).collect()
    }

    pub fn segment(&self, id: u32) -> Option<SegmentView<'_>> {
        self.segments.get(&id).map(|s| s.view())
    }

    /// Segment owning `zone` on `drive`.
    pub fn zone_owner(&self, drive: usize, zone: u32) -> Option<u32> {
        self.owner[drive][zone as usize]
    }

    pub fn decode_pba(&self, pba: u32) -> Pba {
        let g = self.array.geometry();
        Pba::unpack(pba, g.num_zones, g.zone_capacity_blocks)
    }

    pub(crate) fn encode_pba(&self, p: Pba) -> u32 {
        let g = self.array.geometry();
        p.pack(g.num_zones, g.zone_capacity_blocks)
    }

    /// (segment, bitmap index) of a data-region block.
    pub fn validity_slot(&self, pba: u32) -> Option<(u32, usize)> {
        let p = self.decode_pba(pba);
        let id = self.owner.get(p.drive)?.get(p.zone as usize).copied().flatten()?;
        let g = self.segments.get(&id)?.desc.geometry;
        if p.offset < g.data_start() || p.offset >= g.data_end() {
            return None;
        }
        Some((
            id,
            p.drive * g.data_blocks() as usize + (p.offset - g.data_start()) as usize,
        ))
    }

    pub fn is_idle(&self) -> bool {
        self.events.is_empty() && self.msgs.is_empty()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.events.keys().next().map(|(t, _)| *t)
    }

    pub(crate) fn schedule(&mut self, at: SimTime, e: Event) {
        let key = (at.max(self.now), self.event_seq);
        self.event_seq += 1;
        self.events.insert(key, e);
    }

    pub(crate) fn alloc_ts(&mut self) -> u64 {
        let t = self.next_ts;
        self.next_ts += 1;
        t
    }

    /// Processes the earliest event and everything it triggers. Returns
    /// false when nothing is scheduled.
    pub fn step(&mut self) -> bool {
        let Some((&(t, s), _)) = self.events.iter().next() else {
            return false;
        };
        let ev = self.events.remove(&(t, s)).expect("present");
        self.now = t;
        match ev {
            Event::Device { drive, command } => self.on_device_completion(drive, command),
            Event::Read(token) => self.on_read_done(token),
            Event::Degraded(token) => self.on_degraded_issue(token),
            Event::FillTimeout { class, epoch } => self.on_fill_timeout(class, epoch),
        }
        self.drain();
        true
    }

    pub fn run_until(&mut self, t: SimTime) {
        while let Some(next) = self.next_event_time() {
            if next > t {
                break;
            }
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    /// Steps until at least one request completes or nothing is left.
    pub fn run_until_completion(&mut self) {
        while self.completions.is_empty() && self.step() {}
    }

    pub fn take_completions(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completions)
    }

    pub(crate) fn drain(&mut self) {
        loop {
            while let Some(m) = self.msgs.pop_front() {
                match m {
                    Msg::StripePersisted(id) => self.on_stripe_persisted(id),
                    Msg::SegmentReady(id) => self.pump_segment(id),
                    Msg::SpaceChanged => {
                        self.retry_slots();
                        self.release_admission();
                    }
                }
            }
            self.gc_tick();
            self.evict_if_needed();
            if self.msgs.is_empty() {
                break;
            }
        }
    }

    pub(crate) fn complete_request(&mut self, id: RequestId) {
        let r = self.requests.remove(&id).expect("live request");
        self.completions.push(Completion {
            id,
            kind: r.kind,
            lba: r.lba,
            blocks: r.blocks,
            submitted_at: r.submitted_at,
            completed_at: self.now,
            data: r.data,
            error: r.error,
        });
    }

    fn new_request(&mut self, kind: RequestKind, lba: u64, blocks: u32) -> RequestId {
        let id = self.next_request;
        self.next_request += 1;
        self.requests.insert(
            id,
            Request {
                kind,
                lba,
                blocks,
                submitted_at: self.now,
                remaining: blocks,
                data: Vec::new(),
                error: None,
            },
        );
        id
    }

    fn reject(&mut self, id: RequestId, e: EngineError) -> RequestId {
        self.requests.get_mut(&id).expect("live").error = Some(e);
        self.complete_request(id);
        id
    }

    /// Submits a write of `data.len()` blocks starting at block `lba`.
    /// Completion arrives once every block is durable and indexed.
    pub fn submit_write(&mut self, lba: u64, data: Vec<Payload>) -> RequestId {
        let n = data.len() as u32;
        let id = self.new_request(RequestKind::Write, lba, n);
        self.stats.write_requests += 1;
        if lba + n as u64 > self.logical_blocks {
            return self.reject(
                id,
                EngineError::OutOfLogicalSpace {
                    lba: lba + n as u64 - 1,
                    capacity: self.logical_blocks,
                },
            );
        }
        if !self.array.failed_drives().is_empty() {
            return self.reject(id, EngineError::Degraded);
        }
        if n == 0 {
            self.complete_request(id);
            return id;
        }
        if !self.admission.is_empty() || self.policy.admission_blocked(self.free_zones()) {
            self.admission.push_back((id, data));
        } else {
            self.dispatch_write(id, data);
        }
        self.drain();
        id
    }

    /// Submits a read of `blocks` blocks starting at block `lba`.
    pub fn submit_read(&mut self, lba: u64, blocks: u32) -> RequestId {
        let id = self.new_request(RequestKind::Read, lba, blocks);
        self.stats.read_requests += 1;
        if lba + blocks as u64 > self.logical_blocks {
            return self.reject(
                id,
                EngineError::OutOfLogicalSpace {
                    lba: lba + blocks as u64 - 1,
                    capacity: self.logical_blocks,
                },
            );
        }
        if blocks == 0 {
            self.complete_request(id);
            return id;
        }
        self.requests.get_mut(&id).expect("live").data = vec![None; blocks as usize];
        for i in 0..blocks as usize {
            self.start_lookup(id, i, lba + i as u64);
        }
        self.drain();
        id
    }

    fn release_admission(&mut self) {
        while !self.admission.is_empty() && !self.policy.admission_blocked(self.free_zones()) {
            let (id, data) = self.admission.pop_front().expect("non-empty");
            self.dispatch_write(id, data);
        }
    }

    /// Marks a drive failed. Reads then decode around it.
    pub fn fail_drive(&mut self, drive: usize) -> Result<(), EngineError> {
        if !self.is_idle() {
            return Err(EngineError::Busy);
        }
        self.array.fail_drive(drive)?;
        Ok(())
    }

    /// Convenience for tests and tools: submits a write and runs until it
    /// completes.
    pub fn write_sync(&mut self, lba: u64, data: Vec<Payload>) -> Completion {
        let id = self.submit_write(lba, data);
        self.wait_for(id)
    }

    pub fn read_sync(&mut self, lba: u64, blocks: u32) -> Completion {
        let id = self.submit_read(lba, blocks);
        self.wait_for(id)
    }

    fn wait_for(&mut self, id: RequestId) -> Completion {
        loop {
            if let Some(i) = self.completions.iter().position(|c| c.id == id) {
                return self.completions.remove(i);
            }
            assert!(self.step(), "request {id} never completed");
        }
    }

    pub(crate) fn class_index(class: SegmentClass) -> usize {
        match class {
            SegmentClass::Small => 0,
            SegmentClass::Large => 1,
        }
    }

    pub(crate) fn class_of(i: usize) -> SegmentClass {
        if i == 0 {
            SegmentClass::Small
        } else {
            SegmentClass::Large
        }
    }

    /// Class actually used for `class`, falling back when no slot serves it.
    pub(crate) fn effective_class(&self, class: SegmentClass) -> SegmentClass {
        if self.slots.iter().any(|s| s.spec.class == class) {
            class
        } else {
            match class {
                SegmentClass::Small => SegmentClass::Large,
                SegmentClass::Large => SegmentClass::Small,
            }
        }
    }
}

impl Segment {
    pub(crate) fn view(&self) -> SegmentView<'_> {
        SegmentView {
            descriptor: &self.desc,
            phase: self.phase,
            next_seq: self.next_seq,
            cst: self.cst.as_ref(),
        }
    }
}
