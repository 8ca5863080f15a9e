use crate::{CommandId, CompletionEvent, DeviceError, DeviceGeometry, ReadCompletion, SimTime, StoredBlock, ZnsDevice};

/// A set of drives sharing one mutation counter, so a crash can be injected
/// at an exact command boundary across the whole array.
///
/// Every durable state change (write or append completion, reset, finish)
/// counts as one mutation. When an armed crash point is reached, the durable
/// state at that instant is captured; the live array keeps running so the
/// caller can stop at its own pace and then pick up the captured image.
#[derive(Clone, Debug)]
pub struct DeviceArray {
    drives: Vec<ZnsDevice>,
    mutations: u64,
    crash_after: Option<u64>,
    crash_image: Option<Vec<ZnsDevice>>,
}

impl DeviceArray {
    pub fn new(geometry: DeviceGeometry, drives: usize) -> Result<Self, DeviceError> {
        let drives = (0..drives)
            .map(|_| ZnsDevice::new(geometry.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_drives(drives))
    }

    pub fn from_drives(drives: Vec<ZnsDevice>) -> Self {
        DeviceArray {
            drives,
            mutations: 0,
            crash_after: None,
            crash_image: None,
        }
    }

    pub fn width(&self) -> usize {
        self.drives.len()
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        self.drives[0].geometry()
    }

    pub fn drive(&self, d: usize) -> &ZnsDevice {
        &self.drives[d]
    }

    pub fn drive_mut(&mut self, d: usize) -> &mut ZnsDevice {
        &mut self.drives[d]
    }

    pub fn drives(&self) -> &[ZnsDevice] {
        &self.drives
    }

    fn get(&mut self, d: usize) -> Result<&mut ZnsDevice, DeviceError> {
        self.drives.get_mut(d).ok_or(DeviceError::NoSuchDrive(d))
    }

    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    /// Arms a crash that captures the durable state right after mutation
    /// number `n` (counting from 1). `n = 0` captures the current state.
    pub fn arm_crash(&mut self, n: u64) {
        self.crash_image = None;
        self.crash_after = Some(self.mutations + n);
        if n == 0 {
            self.capture();
        }
    }

    pub fn crash_tripped(&self) -> bool {
        self.crash_image.is_some()
    }

    pub fn take_crash_image(&mut self) -> Option<DeviceArray> {
        self.crash_after = None;
        self.crash_image.take().map(DeviceArray::from_drives)
    }

    fn capture(&mut self) {
        self.crash_image = Some(self.drives.iter().map(|d| d.crash_image()).collect());
    }

    fn count(&mut self) {
        self.mutations += 1;
        if self.crash_image.is_none() && self.crash_after == Some(self.mutations) {
            self.capture();
        }
    }

    /// Durable state of every drive right now.
    pub fn crash_image(&self) -> DeviceArray {
        DeviceArray::from_drives(self.drives.iter().map(|d| d.crash_image()).collect())
    }

    pub fn zone_write(
        &mut self,
        now: SimTime,
        drive: usize,
        zone: u32,
        offset: u32,
        blocks: Vec<StoredBlock>,
    ) -> Result<CompletionEvent, DeviceError> {
        self.get(drive)?.zone_write(now, zone, offset, blocks)
    }

    pub fn zone_append(
        &mut self,
        now: SimTime,
        drive: usize,
        zone: u32,
        blocks: Vec<StoredBlock>,
    ) -> Result<CompletionEvent, DeviceError> {
        self.get(drive)?.zone_append(now, zone, blocks)
    }

    pub fn zone_read(
        &mut self,
        now: SimTime,
        drive: usize,
        zone: u32,
        offset: u32,
        count: u32,
    ) -> Result<ReadCompletion, DeviceError> {
        self.get(drive)?.zone_read(now, zone, offset, count)
    }

    pub fn complete(&mut self, drive: usize, command: CommandId) -> Result<CompletionEvent, DeviceError> {
        let ev = self.get(drive)?.complete(command)?;
        self.count();
        Ok(ev)
    }

    pub fn zone_reset(&mut self, drive: usize, zone: u32) -> Result<(), DeviceError> {
        self.get(drive)?.zone_reset(zone)?;
        self.count();
        Ok(())
    }

    pub fn zone_finish(&mut self, drive: usize, zone: u32) -> Result<(), DeviceError> {
        self.get(drive)?.zone_finish(zone)?;
        self.count();
        Ok(())
    }

    pub fn fail_drive(&mut self, drive: usize) -> Result<(), DeviceError> {
        self.get(drive)?.fail();
        Ok(())
    }

    pub fn erase_drive(&mut self, drive: usize) -> Result<(), DeviceError> {
        self.get(drive)?.erase();
        Ok(())
    }

    /// Swaps in a blank drive with the same geometry.
    pub fn replace_drive(&mut self, drive: usize) -> Result<(), DeviceError> {
        let g = self.get(drive)?.geometry().clone();
        self.drives[drive] = ZnsDevice::new(g)?;
        Ok(())
    }

    pub fn failed_drives(&self) -> Vec<usize> {
        (0..self.drives.len()).filter(|&d| self.drives[d].is_failed()).collect()
    }
}
