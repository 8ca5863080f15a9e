use std::collections::BTreeMap;

use crate::{DeviceError, DeviceGeometry, SimTime, StoredBlock, ZoneDescriptor, ZoneState};

pub type CommandId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CommandKind {
    Write,
    Append,
}

/// Completion record for a write command. For appends, `offset` is the
/// offset the device assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompletionEvent {
    pub command: CommandId,
    pub kind: CommandKind,
    pub zone: u32,
    pub offset: u32,
    pub blocks: u32,
    pub submitted_at: SimTime,
    pub completes_at: SimTime,
}

#[derive(Clone, Debug)]
pub struct ReadCompletion {
    pub blocks: Vec<StoredBlock>,
    pub completes_at: SimTime,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Zone {
    pub(crate) state: ZoneState,
    pub(crate) write_pointer: u32,
    pub(crate) durable: Vec<Option<StoredBlock>>,
    pub(crate) finished: bool,
    pub(crate) zone_write_in_flight: bool,
    pub(crate) appends_in_flight: u32,
}

impl Default for ZoneState {
    fn default() -> Self {
        ZoneState::Empty
    }
}

impl Zone {
    fn high_water(&self) -> u32 {
        self.durable
            .iter()
            .rposition(|b| b.is_some())
            .map_or(0, |i| i as u32 + 1)
    }

    /// State as it would be found after power loss: in-flight commands
    /// vanish and the write pointer falls back to the durable high-water
    /// mark. Gaps below it stay as unwritten holes.
    fn durable_copy(&self, capacity: u32) -> Zone {
        let hw = self.high_water();
        let mut durable = self.durable.clone();
        durable.truncate(hw as usize);
        let state = if self.finished || hw == capacity {
            ZoneState::Full
        } else if hw == 0 {
            ZoneState::Empty
        } else {
            ZoneState::Open
        };
        Zone {
            state,
            write_pointer: hw,
            durable,
            finished: self.finished,
            zone_write_in_flight: false,
            appends_in_flight: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Pending {
    event: CompletionEvent,
    blocks: Vec<StoredBlock>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub blocks_written: u64,
    pub blocks_read: u64,
}

/// One simulated drive.
#[derive(Clone, Debug)]
pub struct ZnsDevice {
    geometry: DeviceGeometry,
    zones: Vec<Zone>,
    chip_free_at: Vec<SimTime>,
    pending: BTreeMap<CommandId, Pending>,
    next_command: CommandId,
    failed: bool,
    stats: DeviceStats,
}

impl ZnsDevice {
    pub fn new(geometry: DeviceGeometry) -> Result<Self, DeviceError> {
        geometry.validate()?;
        Ok(Self::fresh(geometry))
    }

    fn fresh(geometry: DeviceGeometry) -> Self {
        ZnsDevice {
            zones: vec![Zone::default(); geometry.num_zones as usize],
            chip_free_at: vec![0; geometry.total_chips() as usize],
            pending: BTreeMap::new(),
            next_command: 0,
            failed: false,
            stats: DeviceStats::default(),
            geometry,
        }
    }

    pub(crate) fn from_parts(geometry: DeviceGeometry, zones: Vec<Zone>, failed: bool) -> Self {
        let mut d = Self::fresh(geometry);
        d.zones = zones;
        d.failed = failed;
        d
    }

    pub(crate) fn zones_raw(&self) -> &[Zone] {
        &self.zones
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    pub fn num_zones(&self) -> u32 {
        self.geometry.num_zones
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }

    pub fn open_zone_count(&self) -> u32 {
        self.zones.iter().filter(|z| z.state == ZoneState::Open).count() as u32
    }

    fn zone_mut(&mut self, zone: u32) -> Result<&mut Zone, DeviceError> {
        self.zones.get_mut(zone as usize).ok_or(DeviceError::NoSuchZone(zone))
    }

    fn zone_ref(&self, zone: u32) -> Result<&Zone, DeviceError> {
        self.zones.get(zone as usize).ok_or(DeviceError::NoSuchZone(zone))
    }

    pub fn zone(&self, zone: u32) -> Result<ZoneDescriptor, DeviceError> {
        let z = self.zone_ref(zone)?;
        Ok(ZoneDescriptor {
            zone_id: zone,
            state: z.state,
            write_pointer: z.write_pointer,
            capacity: self.geometry.zone_capacity_blocks,
        })
    }

    pub fn zones(&self) -> impl Iterator<Item = ZoneDescriptor> + '_ {
        (0..self.geometry.num_zones).map(|z| self.zone(z).expect("in range"))
    }

    /// Reserves chips for `n` pages starting at `offset` and returns the
    /// time the last page finishes.
    fn occupy_chips(&mut self, now: SimTime, zone: u32, offset: u32, n: u32, cost: SimTime) -> SimTime {
        let mut done = now;
        for i in 0..n {
            let chip = self.geometry.chip_of(zone, offset + i);
            let start = self.chip_free_at[chip].max(now);
            let end = start + cost;
            self.chip_free_at[chip] = end;
            done = done.max(end);
        }
        done
    }

    fn check_writable(&self, zone: u32, n: u32) -> Result<(), DeviceError> {
        if self.failed {
            return Err(DeviceError::DriveFailed);
        }
        let z = self.zone_ref(zone)?;
        if z.state == ZoneState::Full {
            return Err(DeviceError::ZoneFull(zone));
        }
        if z.write_pointer as u64 + n as u64 > self.geometry.zone_capacity_blocks as u64 {
            return Err(DeviceError::ZoneFull(zone));
        }
        if z.state == ZoneState::Empty && n > 0 && self.open_zone_count() >= self.geometry.max_open_zones {
            return Err(DeviceError::TooManyOpenZones);
        }
        Ok(())
    }

    fn advance_pointer(&mut self, zone: u32, n: u32) {
        let cap = self.geometry.zone_capacity_blocks;
        let z = &mut self.zones[zone as usize];
        z.write_pointer += n;
        if n > 0 {
            z.state = if z.write_pointer == cap {
                ZoneState::Full
            } else {
                ZoneState::Open
            };
        }
    }

    fn register(&mut self, event: CompletionEvent, blocks: Vec<StoredBlock>) -> CompletionEvent {
        self.pending.insert(event.command, Pending { event, blocks });
        event
    }

    fn next_id(&mut self) -> CommandId {
        let id = self.next_command;
        self.next_command += 1;
        id
    }

    pub fn zone_write(
        &mut self,
        now: SimTime,
        zone: u32,
        offset: u32,
        blocks: Vec<StoredBlock>,
    ) -> Result<CompletionEvent, DeviceError> {
        let n = blocks.len() as u32;
        if self.failed {
            return Err(DeviceError::DriveFailed);
        }
        {
            let z = self.zone_ref(zone)?;
            if z.zone_write_in_flight || z.appends_in_flight > 0 {
                return Err(DeviceError::ConcurrentWriteConflict(zone));
            }
            if z.state == ZoneState::Full {
                return Err(DeviceError::ZoneFull(zone));
            }
            if offset != z.write_pointer {
                return Err(DeviceError::OffsetMismatch {
                    zone,
                    offset,
                    write_pointer: z.write_pointer,
                });
            }
        }
        self.check_writable(zone, n)?;
        let id = self.next_id();
        let completes_at = self.occupy_chips(now, zone, offset, n, self.geometry.write_latency_ns());
        self.advance_pointer(zone, n);
        if n > 0 {
            self.zones[zone as usize].zone_write_in_flight = true;
        }
        self.stats.blocks_written += n as u64;
        let event = CompletionEvent {
            command: id,
            kind: CommandKind::Write,
            zone,
            offset,
            blocks: n,
            submitted_at: now,
            completes_at,
        };
        Ok(self.register(event, blocks))
    }

    pub fn zone_append(
        &mut self,
        now: SimTime,
        zone: u32,
        blocks: Vec<StoredBlock>,
    ) -> Result<CompletionEvent, DeviceError> {
        let n = blocks.len() as u32;
        if self.failed {
            return Err(DeviceError::DriveFailed);
        }
        if self.zone_ref(zone)?.zone_write_in_flight {
            return Err(DeviceError::ConcurrentWriteConflict(zone));
        }
        self.check_writable(zone, n)?;
        let id = self.next_id();
        let offset = self.zones[zone as usize].write_pointer;
        let mut completes_at = self.occupy_chips(now, zone, offset, n, self.geometry.write_latency_ns());
        self.advance_pointer(zone, n);
        completes_at += self.geometry.append_penalty_ns() * self.open_zone_count() as u64;
        if n > 0 {
            self.zones[zone as usize].appends_in_flight += 1;
        }
        self.stats.blocks_written += n as u64;
        let event = CompletionEvent {
            command: id,
            kind: CommandKind::Append,
            zone,
            offset,
            blocks: n,
            submitted_at: now,
            completes_at,
        };
        Ok(self.register(event, blocks))
    }

    /// Makes a submitted write durable. The caller decides when: normally
    /// when its simulated clock reaches `completes_at`.
    pub fn complete(&mut self, command: CommandId) -> Result<CompletionEvent, DeviceError> {
        let Pending { event, blocks } = self
            .pending
            .remove(&command)
            .ok_or(DeviceError::UnknownCommand(command))?;
        let z = &mut self.zones[event.zone as usize];
        if event.blocks > 0 {
            match event.kind {
                CommandKind::Write => z.zone_write_in_flight = false,
                CommandKind::Append => z.appends_in_flight -= 1,
            }
        }
        let end = (event.offset + event.blocks) as usize;
        if z.durable.len() < end {
            z.durable.resize(end, None);
        }
        for (i, b) in blocks.into_iter().enumerate() {
            z.durable[event.offset as usize + i] = Some(b);
        }
        Ok(event)
    }

    /// Completes every pending command due at or before `now`, in
    /// completion-time order.
    pub fn poll(&mut self, now: SimTime) -> Vec<CompletionEvent> {
        let mut due: Vec<(SimTime, CommandId)> = self
            .pending
            .values()
            .filter(|p| p.event.completes_at <= now)
            .map(|p| (p.event.completes_at, p.event.command))
            .collect();
        due.sort_unstable();
        due.into_iter()
            .map(|(_, id)| self.complete(id).expect("pending"))
            .collect()
    }

    pub fn next_completion_time(&self) -> Option<SimTime> {
        self.pending.values().map(|p| p.event.completes_at).min()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn zone_read(
        &mut self,
        now: SimTime,
        zone: u32,
        offset: u32,
        count: u32,
    ) -> Result<ReadCompletion, DeviceError> {
        if self.failed {
            return Err(DeviceError::DriveFailed);
        }
        let z = self.zone_ref(zone)?;
        if count == 0 {
            return Ok(ReadCompletion {
                blocks: Vec::new(),
                completes_at: now,
            });
        }
        if z.state == ZoneState::Empty {
            return Err(DeviceError::ZoneEmpty(zone));
        }
        let end = offset as u64 + count as u64;
        if end > z.write_pointer as u64 {
            return Err(DeviceError::ReadBeyondWritePointer {
                zone,
                offset,
                end: end.min(u32::MAX as u64) as u32,
                write_pointer: z.write_pointer,
            });
        }
        let blocks = (offset..offset + count)
            .map(|o| {
                z.durable
                    .get(o as usize)
                    .and_then(|b| b.clone())
                    .unwrap_or_else(StoredBlock::zero)
            })
            .collect();
        let completes_at = self.occupy_chips(now, zone, offset, count, self.geometry.read_latency_ns());
        self.stats.blocks_read += count as u64;
        Ok(ReadCompletion { blocks, completes_at })
    }

    /// Reads durable contents without touching the timing model. Used by
    /// image comparison and tests.
    pub fn peek(&self, zone: u32, offset: u32) -> Option<&StoredBlock> {
        self.zones
            .get(zone as usize)
            .and_then(|z| z.durable.get(offset as usize))
            .and_then(|b| b.as_ref())
    }

    pub fn zone_reset(&mut self, zone: u32) -> Result<(), DeviceError> {
        if self.failed {
            return Err(DeviceError::DriveFailed);
        }
        *self.zone_mut(zone)? = Zone::default();
        self.pending.retain(|_, p| p.event.zone != zone);
        Ok(())
    }

    pub fn zone_finish(&mut self, zone: u32) -> Result<(), DeviceError> {
        if self.failed {
            return Err(DeviceError::DriveFailed);
        }
        let z = self.zone_mut(zone)?;
        match z.state {
            ZoneState::Empty => Err(DeviceError::FinishOnEmpty(zone)),
            ZoneState::Full => {
                z.finished = true;
                Ok(())
            }
            ZoneState::Open => {
                z.state = ZoneState::Full;
                z.finished = true;
                Ok(())
            }
        }
    }

    pub fn fail(&mut self) {
        self.failed = true;
    }

    pub fn erase(&mut self) {
        for z in &mut self.zones {
            *z = Zone::default();
        }
        self.pending.clear();
    }

    /// Durable state only, as seen after a power cut.
    pub fn crash_image(&self) -> ZnsDevice {
        let cap = self.geometry.zone_capacity_blocks;
        let zones = self.zones.iter().map(|z| z.durable_copy(cap)).collect();
        let mut d = Self::from_parts(self.geometry.clone(), zones, self.failed);
        d.next_command = self.next_command;
        d
    }

    /// Compares durable zone contents, treating missing blocks and
    /// all-zero blocks as equal.
    pub fn zone_image_eq(&self, other: &ZnsDevice, zone: u32) -> bool {
        let (a, b) = (&self.zones[zone as usize], &other.zones[zone as usize]);
        if a.state != b.state || a.write_pointer != b.write_pointer {
            return false;
        }
        let n = a.durable.len().max(b.durable.len());
        let zero = StoredBlock::zero();
        (0..n).all(|i| {
            let x = a.durable.get(i).and_then(|v| v.as_ref()).unwrap_or(&zero);
            let y = b.durable.get(i).and_then(|v| v.as_ref()).unwrap_or(&zero);
            x.oob == y.oob && x.bytes() == y.bytes()
        })
    }
}
