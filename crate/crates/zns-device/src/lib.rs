//! Simulated zoned-namespace SSD.
//!
//! Zones are append-only regions with a write pointer. Two write commands
//! exist: Zone Write names the target offset and may have only one command
//! outstanding per zone, while Zone Append lets the device pick the offset
//! and allows many in flight. Every block carries a 64-byte out-of-band
//! area that is persisted atomically with the payload.
//!
//! Timing is a discrete-event model: each block occupies one flash chip
//! for a page latency, and a command completes when its last chip is done.
//! Nothing here reads the wall clock, so identical submission sequences
//! always produce identical completion times.

mod array;
mod device;
mod geometry;
mod image;

pub use array::DeviceArray;
pub use device::{CommandId, CommandKind, CompletionEvent, ReadCompletion, ZnsDevice};
pub use geometry::{us_to_ns, DeviceGeometry};

use thiserror::Error;

pub const BLOCK_SIZE: usize = 4096;
pub const OOB_SIZE: usize = 64;

/// Simulated time in nanoseconds.
pub type SimTime = u64;

pub type Page = [u8; BLOCK_SIZE];

pub static ZERO_PAGE: Page = [0u8; BLOCK_SIZE];

pub fn zeroed_page() -> Box<Page> {
    vec![0u8; BLOCK_SIZE]
        .into_boxed_slice()
        .try_into()
        .expect("length is BLOCK_SIZE")
}

pub fn page_from_slice(bytes: &[u8]) -> Box<Page> {
    let mut p = zeroed_page();
    p.copy_from_slice(bytes);
    p
}

/// Payload plus out-of-band metadata for one block.
///
/// A `None` payload is an all-zero page. Large simulated fills rely on this
/// to keep the device image small.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredBlock {
    pub payload: Option<Box<Page>>,
    pub oob: [u8; OOB_SIZE],
}

impl StoredBlock {
    pub fn new(payload: Option<Box<Page>>, oob: [u8; OOB_SIZE]) -> Self {
        StoredBlock { payload, oob }
    }

    pub fn zero() -> Self {
        StoredBlock {
            payload: None,
            oob: [0u8; OOB_SIZE],
        }
    }

    pub fn bytes(&self) -> &Page {
        match &self.payload {
            Some(p) => p,
            None => &ZERO_PAGE,
        }
    }

    /// Drops an explicit all-zero payload in favour of the sparse form.
    pub fn compact(mut self) -> Self {
        if let Some(p) = &self.payload {
            if p.iter().all(|&b| b == 0) {
                self.payload = None;
            }
        }
        self
    }

    pub fn is_hole(&self) -> bool {
        self.payload.is_none() && self.oob.iter().all(|&b| b == 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ZoneState {
    Empty,
    Open,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZoneDescriptor {
    pub zone_id: u32,
    pub state: ZoneState,
    pub write_pointer: u32,
    pub capacity: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("zone {0} does not exist")]
    NoSuchZone(u32),
    #[error("zone {zone}: write at offset {offset} but write pointer is {write_pointer}")]
    OffsetMismatch { zone: u32, offset: u32, write_pointer: u32 },
    #[error("zone {0} is full")]
    ZoneFull(u32),
    #[error("zone {0} has a conflicting command in flight")]
    ConcurrentWriteConflict(u32),
    #[error("open-zone limit reached")]
    TooManyOpenZones,
    #[error("zone {zone}: read of [{offset}, {end}) beyond write pointer {write_pointer}")]
    ReadBeyondWritePointer {
        zone: u32,
        offset: u32,
        end: u32,
        write_pointer: u32,
    },
    #[error("zone {0} is empty")]
    ZoneEmpty(u32),
    #[error("zone {0} is empty and cannot be finished")]
    FinishOnEmpty(u32),
    #[error("drive has failed")]
    DriveFailed,
    #[error("no such drive {0}")]
    NoSuchDrive(usize),
    #[error("unknown command {0}")]
    UnknownCommand(u64),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("image: {0}")]
    Image(String),
}
