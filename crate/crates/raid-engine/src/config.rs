use erasure_codec::{RaidKind, RaidScheme};
use garbage_collector::GcPolicy;
use segment_layout::{compute_geometry, SegmentClass, SegmentGeometry, WriteMode};
use zns_device::{DeviceGeometry, BLOCK_SIZE};

use crate::EngineError;

/// How segments are written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayoutMode {
    /// Large-chunk segments by Zone Write, small-chunk segments by Zone
    /// Write with one reserved Zone Append segment.
    Hybrid,
    /// Every segment by Zone Write, group size 1.
    ZoneWriteOnly,
    /// Every segment by Zone Append, one group spanning the data region.
    ZoneAppendOnly,
}

impl std::str::FromStr for LayoutMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "hybrid" => Ok(LayoutMode::Hybrid),
            "zonewrite" | "zonewriteonly" | "zw" => Ok(LayoutMode::ZoneWriteOnly),
            "zoneappend" | "zoneappendonly" | "za" => Ok(LayoutMode::ZoneAppendOnly),
            _ => Err(EngineError::Config(format!("unknown layout mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for LayoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayoutMode::Hybrid => "hybrid",
            LayoutMode::ZoneWriteOnly => "zone-write-only",
            LayoutMode::ZoneAppendOnly => "zone-append-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeConfig {
    pub scheme: RaidScheme,
    pub chunk_small_bytes: u32,
    pub chunk_large_bytes: u32,
    pub n_small: usize,
    pub n_large: usize,
    pub group_size: u32,
    pub layout: LayoutMode,
    /// Logical size in bytes; `None` derives it from `reserved`.
    pub logical_bytes: Option<u64>,
    /// Spare physical space as a fraction of logical space.
    pub reserved: f64,
    /// Resident L2P groups; `None` keeps the whole table in memory.
    pub l2p_cap_groups: Option<usize>,
    pub gc_threshold: f64,
    /// `None` picks one zone per routing slot plus one.
    pub gc_reserve_zones: Option<u32>,
    pub gc_max_reads: usize,
    pub fill_timeout_us: f64,
    /// Host time charged per compact stripe table entry inspected.
    pub cst_entry_ns: f64,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            scheme: RaidScheme::four_drive(RaidKind::Raid5),
            chunk_small_bytes: 8 * 1024,
            chunk_large_bytes: 16 * 1024,
            n_small: 2,
            n_large: 2,
            group_size: 256,
            layout: LayoutMode::Hybrid,
            logical_bytes: None,
            reserved: 0.2,
            l2p_cap_groups: None,
            gc_threshold: 0.15,
            gc_reserve_zones: None,
            gc_max_reads: 32,
            fill_timeout_us: 100.0,
            cst_entry_ns: 1.3,
        }
    }
}

/// One open-segment position in the router.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotSpec {
    pub class: SegmentClass,
    pub mode: WriteMode,
    pub chunk_blocks: u32,
    pub group_size: u32,
}

impl VolumeConfig {
    pub fn chunk_blocks(&self, class: SegmentClass) -> u32 {
        let bytes = match class {
            SegmentClass::Small => self.chunk_small_bytes,
            SegmentClass::Large => self.chunk_large_bytes,
        };
        bytes / BLOCK_SIZE as u32
    }

    pub fn validate(&self, device: &DeviceGeometry) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        for b in [self.chunk_small_bytes, self.chunk_large_bytes] {
            if b == 0 || b % BLOCK_SIZE as u32 != 0 {
                return bad(format!("chunk size {b} is not a positive multiple of 4096"));
            }
        }
        if self.chunk_small_bytes >= self.chunk_large_bytes {
            return bad("small chunk must be smaller than large chunk".into());
        }
        if self.n_small + self.n_large == 0 {
            return bad("at least one open segment is required".into());
        }
        if self.group_size == 0 {
            return bad("group size must be positive".into());
        }
        if (self.n_small + self.n_large) as u32 > device.max_open_zones {
            return bad(format!(
                "{} open segments exceed the device limit of {} open zones",
                self.n_small + self.n_large,
                device.max_open_zones
            ));
        }
        if !(self.reserved >= 0.0) {
            return bad("reserved space must be non-negative".into());
        }
        GcPolicy::new(self.gc_threshold, 0).map_err(|e| EngineError::Config(e.to_string()))?;
        for class in [SegmentClass::Small, SegmentClass::Large] {
            compute_geometry(device.zone_capacity_blocks, self.chunk_blocks(class))
                .map_err(|e| EngineError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn segment_geometry(&self, device: &DeviceGeometry, spec: &SlotSpec) -> SegmentGeometry {
        let g = compute_geometry(device.zone_capacity_blocks, spec.chunk_blocks).expect("validated");
        let group = match spec.mode {
            WriteMode::ZoneWrite => 1,
            WriteMode::ZoneAppend if self.layout == LayoutMode::ZoneAppendOnly => g.stripes,
            WriteMode::ZoneAppend => self.group_size.min(g.stripes),
        };
        g.with_group_size(group)
    }

    /// Routing slots: small slots first, then large.
    pub fn slots(&self) -> Vec<SlotSpec> {
        let mut out = Vec::new();
        let small = self.chunk_blocks(SegmentClass::Small);
        let large = self.chunk_blocks(SegmentClass::Large);
        let spec = |class, mode, chunk_blocks| SlotSpec {
            class,
            mode,
            chunk_blocks,
            group_size: if mode == WriteMode::ZoneWrite {
                1
            } else {
                self.group_size
            },
        };
        for i in 0..self.n_small {
            let mode = match self.layout {
                LayoutMode::ZoneWriteOnly => WriteMode::ZoneWrite,
                LayoutMode::ZoneAppendOnly => WriteMode::ZoneAppend,
                LayoutMode::Hybrid if i + 1 == self.n_small => WriteMode::ZoneAppend,
                LayoutMode::Hybrid => WriteMode::ZoneWrite,
            };
            out.push(spec(SegmentClass::Small, mode, small));
        }
        for _ in 0..self.n_large {
            let mode = match self.layout {
                LayoutMode::ZoneAppendOnly => WriteMode::ZoneAppend,
                _ => WriteMode::ZoneWrite,
            };
            out.push(spec(SegmentClass::Large, mode, large));
        }
        out
    }

    /// Resident L2P groups allowed for a volume on `device`.
    pub fn l2p_cap(&self, device: &DeviceGeometry) -> usize {
        self.l2p_cap_groups
            .unwrap_or(self.logical_blocks(device).div_ceil(l2p_index::GROUP_ENTRIES as u64) as usize)
    }

    pub fn reserve_zones(&self) -> u32 {
        self.gc_reserve_zones
            .unwrap_or((self.n_small + self.n_large) as u32 + 1)
    }

    /// User-visible blocks: explicit size, or the data capacity of the zones
    /// left after the cleaning reserve and the open segments, shrunk by the
    /// reserved fraction.
    pub fn logical_blocks(&self, device: &DeviceGeometry) -> u64 {
        match self.logical_bytes {
            Some(b) => b / BLOCK_SIZE as u64,
            None => {
                let per_zone = [SegmentClass::Small, SegmentClass::Large]
                    .into_iter()
                    .map(|c| {
                        compute_geometry(device.zone_capacity_blocks, self.chunk_blocks(c))
                            .expect("validated")
                            .data_blocks() as u64
                    })
                    .min()
                    .expect("two classes");
                let held = self.reserve_zones() as u64 + (self.n_small + self.n_large) as u64;
                let zones = (device.num_zones as u64).saturating_sub(held);
                let physical = zones * per_zone * self.scheme.k as u64;
                (physical as f64 / (1.0 + self.reserved)).floor() as u64
            }
        }
    }
}
