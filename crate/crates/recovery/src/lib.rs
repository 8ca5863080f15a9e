//! Bringing a volume back after a power loss, and rebuilding replaced
//! drives from the survivors.

mod crash;
mod rebuild;

pub use crash::{recover_crash, RecoveryReport};
pub use rebuild::{rebuild_drives, RebuildReport};

use raid_engine::EngineError;
use segment_layout::LayoutError;
use zns_device::DeviceError;

#[derive(Debug, thiserror::Error)]
pub enum RecoveryError {
    #[error("unrecoverable corruption: {0}")]
    UnrecoverableCorruption(String),
    #[error("more failed drives than the scheme tolerates")]
    TooManyFailures,
    #[error("volume has outstanding work")]
    Busy,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}
