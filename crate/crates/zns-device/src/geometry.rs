use serde::{Deserialize, Serialize};

use crate::{DeviceError, SimTime, BLOCK_SIZE, OOB_SIZE};

/// Physical shape and timing parameters of one simulated drive.
///
/// Latencies are configured in microseconds and converted to nanoseconds
/// internally, which is the resolution of the simulated clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceGeometry {
    pub num_zones: u32,
    pub zone_capacity_blocks: u32,
    pub block_size: u32,
    pub oob_size: u32,
    pub channels: u32,
    pub chips_per_channel: u32,
    pub chips_per_zone: u32,
    pub page_write_latency_us: f64,
    pub page_read_latency_us: f64,
    pub max_open_zones: u32,
    pub append_penalty_per_open_zone_us: f64,
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        DeviceGeometry {
            num_zones: 64,
            zone_capacity_blocks: 16384,
            block_size: BLOCK_SIZE as u32,
            oob_size: OOB_SIZE as u32,
            channels: 4,
            chips_per_channel: 4,
            chips_per_zone: 16,
            page_write_latency_us: 140.0,
            page_read_latency_us: 40.0,
            max_open_zones: 14,
            append_penalty_per_open_zone_us: 0.0,
        }
    }
}

impl DeviceGeometry {
    pub fn with_zones(mut self, num_zones: u32, zone_capacity_blocks: u32) -> Self {
        self.num_zones = num_zones;
        self.zone_capacity_blocks = zone_capacity_blocks;
        self
    }

    pub fn total_chips(&self) -> u32 {
        self.channels * self.chips_per_channel
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |msg: &str| Err(DeviceError::InvalidGeometry(msg.to_string()));
        if self.block_size as usize != BLOCK_SIZE {
            return bad("block_size must be 4096");
        }
        if self.oob_size as usize != OOB_SIZE {
            return bad("oob_size must be 64");
        }
        if self.num_zones == 0 || self.zone_capacity_blocks == 0 {
            return bad("zone count and capacity must be positive");
        }
        if self.channels == 0 || self.chips_per_channel == 0 || self.chips_per_zone == 0 {
            return bad("chip counts must be positive");
        }
        if self.chips_per_zone > self.total_chips() {
            return bad("chips_per_zone exceeds channels * chips_per_channel");
        }
        if !(self.page_write_latency_us >= 0.0
            && self.page_read_latency_us >= 0.0
            && self.append_penalty_per_open_zone_us >= 0.0)
        {
            return bad("latencies must be non-negative");
        }
        if self.max_open_zones == 0 {
            return bad("max_open_zones must be positive");
        }
        Ok(())
    }

    pub fn write_latency_ns(&self) -> SimTime {
        us_to_ns(self.page_write_latency_us)
    }

    pub fn read_latency_ns(&self) -> SimTime {
        us_to_ns(self.page_read_latency_us)
    }

    pub fn append_penalty_ns(&self) -> SimTime {
        us_to_ns(self.append_penalty_per_open_zone_us)
    }

    /// Flash chip serving `offset` of `zone`. Consecutive offsets rotate
    /// over the zone's chips so a run of `chips_per_zone` blocks hits every
    /// chip once.
    pub fn chip_of(&self, zone: u32, offset: u32) -> usize {
        let per_zone = self.chips_per_zone as u64;
        let base = zone as u64 * per_zone;
        ((base + offset as u64 % per_zone) % self.total_chips() as u64) as usize
    }

    /// Upper bound on sustained write bandwidth of a single zone, in MiB/s.
    pub fn zone_write_ceiling_mib_s(&self) -> f64 {
        let bytes_per_us = self.chips_per_zone as f64 * self.block_size as f64 / self.page_write_latency_us;
        bytes_per_us * 1e6 / (1024.0 * 1024.0)
    }
}

pub fn us_to_ns(us: f64) -> SimTime {
    (us * 1000.0).round() as SimTime
}
