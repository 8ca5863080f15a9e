//! Workload generation, trace replay, crash injection and rebuild runs
//! against a simulated ZNS RAID volume, with every read checked against an
//! in-memory shadow of what was written.

pub mod config;
pub mod driver;
pub mod experiments;
pub mod metrics;
pub mod shadow;
pub mod trace;
pub mod workload;

use raid_engine::EngineError;
use recovery::RecoveryError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("simulation stalled with {0} requests outstanding")]
    Stalled(usize),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("trace line {line}: {msg}")]
    TraceParse { line: usize, msg: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
