//! Log-structured RAID over simulated ZNS drives.
//!
//! A [`Volume`] turns block writes into stripes of `k` data and `m` parity
//! chunks, appends them to segments (one zone per drive) and keeps an L2P
//! table pointing at the newest copy of every block. Segments come in two
//! chunk sizes. Large-chunk segments are written with Zone Write at
//! statically aligned offsets; small-chunk segments can also use Zone
//! Append, where a group of `G` stripes may be in flight at once and a
//! compact stripe table remembers which slot holds which stripe.
//!
//! Everything runs on one deterministic event loop over simulated time.
//! Work moves between pipeline stages as messages: dispatch, encoding,
//! device I/O, completion, indexing, segment state and cleaning.

mod codec;
mod config;
mod gc;
mod index;
mod pipeline;
mod read;
mod volume;

pub use codec::{build_oob, reconstruct_block, special_oob};
pub use config::{LayoutMode, SlotSpec, VolumeConfig};
pub use volume::{
    Completion, EngineStats, Phase, RecoveredSegment, RecoveredState, RequestId, RequestKind, SegmentView, Volume,
};

use erasure_codec::CodecError;
use segment_layout::LayoutError;
use thiserror::Error;
use zns_device::{DeviceError, Page};

/// Block payload; `None` is an all-zero block.
pub type Payload = Option<Box<Page>>;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("block {lba} is beyond the logical capacity of {capacity} blocks")]
    OutOfLogicalSpace { lba: u64, capacity: u64 },
    #[error("block {0} has never been written")]
    UnmappedLba(u64),
    #[error("no empty zones left to open a segment")]
    NoFreeZones,
    #[error("more drives failed than the scheme tolerates")]
    TooManyFailures,
    #[error("writes are rejected while a drive is failed")]
    Degraded,
    #[error("operation needs an idle volume")]
    Busy,
    #[error("device: {0}")]
    Device(#[from] DeviceError),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("layout: {0}")]
    Layout(#[from] LayoutError),
}

/// Physical block address packed into 4 bytes:
/// `(drive * zones + zone) * zone_capacity + offset`. `u32::MAX` is
/// reserved for unmapped entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pba {
    pub drive: usize,
    pub zone: u32,
    pub offset: u32,
}

impl Pba {
    pub fn pack(self, zones: u32, capacity: u32) -> u32 {
        let v = (self.drive as u64 * zones as u64 + self.zone as u64) * capacity as u64 + self.offset as u64;
        debug_assert!(v < u32::MAX as u64);
        v as u32
    }

    pub fn unpack(v: u32, zones: u32, capacity: u32) -> Pba {
        let v = v as u64;
        let zone_index = v / capacity as u64;
        Pba {
            drive: (zone_index / zones as u64) as usize,
            zone: (zone_index % zones as u64) as u32,
            offset: (v % capacity as u64) as u32,
        }
    }

    /// Whether every block of the array has a packed address.
    pub fn fits(drives: usize, zones: u32, capacity: u32) -> bool {
        (drives as u64) * zones as u64 * capacity as u64 <= u32::MAX as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pba_round_trip() {
        let p = Pba {
            drive: 3,
            zone: 17,
            offset: 1000,
        };
        let v = p.pack(64, 16384);
        assert_eq!(Pba::unpack(v, 64, 16384), p);
        assert!(Pba::fits(4, 3690, 275_712));
        assert!(!Pba::fits(5, 3690, 275_712));
    }
}
