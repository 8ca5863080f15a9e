//! Run configuration: a TOML file with `[device]`, `[volume]` and
//! `[workload]` tables, each optional, plus command-line overrides.

use std::path::Path;
use std::str::FromStr;

use erasure_codec::{RaidKind, RaidScheme};
use raid_engine::{LayoutMode, VolumeConfig};
use serde::{Deserialize, Serialize};
use zns_device::DeviceGeometry;

use crate::workload::WorkloadSpec;
use crate::HarnessError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub device: DeviceGeometry,
    pub volume: VolumeSection,
    pub workload: WorkloadSpec,
}

/// Resident mapping table size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum L2pCap {
    Full,
    Groups(usize),
    /// Fraction of the whole table, in (0, 1].
    Fraction(f64),
}

impl FromStr for L2pCap {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::Config(format!("bad L2P cap {s:?}: use full, N groups or P%"));
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(L2pCap::Full);
        }
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(p > 0.0 && p <= 100.0) {
                return Err(bad());
            }
            return Ok(L2pCap::Fraction(p / 100.0));
        }
        let g: usize = s.parse().map_err(|_| bad())?;
        if g == 0 {
            return Err(bad());
        }
        Ok(L2pCap::Groups(g))
    }
}

impl std::fmt::Display for L2pCap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            L2pCap::Full => f.write_str("full"),
            L2pCap::Groups(g) => write!(f, "{g}"),
            L2pCap::Fraction(p) => write!(f, "{}%", p * 100.0),
        }
    }
}

impl Serialize for L2pCap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for L2pCap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => L2pCap::from_str(&n.to_string()),
            Raw::S(s) => L2pCap::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    pub scheme: String,
    /// Array width; the scheme picks k and m from it.
    pub drives: usize,
    pub chunk_small: u32,
    pub chunk_large: u32,
    pub ns: usize,
    pub nl: usize,
    pub group_size: u32,
    pub layout: String,
    pub logical_bytes: Option<u64>,
    pub reserved: f64,
    pub l2p_cap: L2pCap,
    pub gc_threshold: f64,
    pub gc_reserve_zones: Option<u32>,
    pub gc_max_reads: usize,
    pub fill_timeout_us: f64,
    pub cst_entry_ns: f64,
}

impl Default for VolumeSection {
    fn default() -> Self {
        let v = VolumeConfig::default();
        VolumeSection {
            scheme: v.scheme.kind.to_string(),
            drives: v.scheme.width(),
            chunk_small: v.chunk_small_bytes,
            chunk_large: v.chunk_large_bytes,
            ns: v.n_small,
            nl: v.n_large,
            group_size: v.group_size,
            layout: v.layout.to_string(),
            logical_bytes: v.logical_bytes,
            reserved: v.reserved,
            l2p_cap: L2pCap::Full,
            gc_threshold: v.gc_threshold,
            gc_reserve_zones: v.gc_reserve_zones,
            gc_max_reads: v.gc_max_reads,
            fill_timeout_us: v.fill_timeout_us,
            cst_entry_ns: v.cst_entry_ns,
        }
    }
}

/// Splits `drives` between data and redundancy for `kind`.
pub fn scheme_for(kind: RaidKind, drives: usize) -> Result<RaidScheme, HarnessError> {
    let (k, m) = match kind {
        RaidKind::Raid0 => (drives, 0),
        RaidKind::Raid01 => (drives / 2, drives / 2),
        RaidKind::Raid4 | RaidKind::Raid5 => (drives.saturating_sub(1), 1),
        RaidKind::Raid6 => (drives.saturating_sub(2), 2),
    };
    if k + m != drives {
        return Err(HarnessError::Config(format!("{kind} cannot span {drives} drives")));
    }
    RaidScheme::new(kind, k, m).map_err(|e| HarnessError::Config(e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Engine configuration with the mapping cap resolved against the
    /// device.
    pub fn volume_config(&self) -> Result<VolumeConfig, HarnessError> {
        let v = &self.volume;
        let kind = RaidKind::from_str(&v.scheme).map_err(|e| HarnessError::Config(e.to_string()))?;
        let layout = LayoutMode::from_str(&v.layout).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut cfg = VolumeConfig {
            scheme: scheme_for(kind, v.drives)?,
            chunk_small_bytes: v.chunk_small,
            chunk_large_bytes: v.chunk_large,
            n_small: v.ns,
            n_large: v.nl,
            group_size: v.group_size,
            layout,
            logical_bytes: v.logical_bytes,
            reserved: v.reserved,
            l2p_cap_groups: None,
            gc_threshold: v.gc_threshold,
            gc_reserve_zones: v.gc_reserve_zones,
            gc_max_reads: v.gc_max_reads,
            fill_timeout_us: v.fill_timeout_us,
            cst_entry_ns: v.cst_entry_ns,
        };
        cfg.validate(&self.device)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let total = cfg
            .logical_blocks(&self.device)
            .div_ceil(segment_layout::MAPPING_GROUP_ENTRIES) as usize;
        cfg.l2p_cap_groups = match v.l2p_cap {
            L2pCap::Full => None,
            L2pCap::Groups(g) => Some(g.min(total.max(1))),
            L2pCap::Fraction(p) => Some(((total as f64 * p).round() as usize).max(1)),
        };
        Ok(cfg)
    }
}
