//! Space reclamation bookkeeping.
//!
//! [`ValidityTracker`] keeps one bit per data-region block of every segment
//! plus incremental counters; [`GcPolicy`] decides when to clean and which
//! sealed segment to clean. Moving the live blocks is the engine's job,
//! since the rewrites go through its normal stripe path.

use std::collections::BTreeMap;

use bitvec::prelude::*;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GcError {
    #[error("no sealed segment has stale blocks")]
    NoSealedSegment,
    #[error("unknown segment {0}")]
    UnknownSegment(u32),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SegmentBits {
    valid: BitVec,
    written: u64,
    valid_count: u64,
}

/// Per-segment validity bitmaps. Block indexes are segment-local data-slot
/// numbers; the engine defines the numbering.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidityTracker {
    segments: BTreeMap<u32, SegmentBits>,
}

impl ValidityTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, segment: u32, blocks: usize) {
        self.segments.insert(
            segment,
            SegmentBits {
                valid: bitvec![0; blocks],
                written: 0,
                valid_count: 0,
            },
        );
    }

    pub fn remove(&mut self, segment: u32) {
        self.segments.remove(&segment);
    }

    pub fn contains(&self, segment: u32) -> bool {
        self.segments.contains_key(&segment)
    }

    pub fn segments(&self) -> impl Iterator<Item = u32> + '_ {
        self.segments.keys().copied()
    }

    fn seg(&mut self, segment: u32) -> Result<&mut SegmentBits, GcError> {
        self.segments.get_mut(&segment).ok_or(GcError::UnknownSegment(segment))
    }

    /// Counts `n` data-region blocks as written, live or not.
    pub fn mark_written(&mut self, segment: u32, n: u64) -> Result<(), GcError> {
        self.seg(segment)?.written += n;
        Ok(())
    }

    pub fn mark_valid(&mut self, segment: u32, block: usize) -> Result<(), GcError> {
        let s = self.seg(segment)?;
        if !s.valid.replace(block, true) {
            s.valid_count += 1;
        }
        Ok(())
    }

    pub fn mark_stale(&mut self, segment: u32, block: usize) -> Result<(), GcError> {
        let s = self.seg(segment)?;
        if s.valid.replace(block, false) {
            s.valid_count -= 1;
        }
        Ok(())
    }

    pub fn is_valid(&self, segment: u32, block: usize) -> bool {
        self.segments
            .get(&segment)
            .is_some_and(|s| s.valid.get(block).is_some_and(|b| *b))
    }

    pub fn valid(&self, segment: u32) -> u64 {
        self.segments.get(&segment).map_or(0, |s| s.valid_count)
    }

    pub fn written(&self, segment: u32) -> u64 {
        self.segments.get(&segment).map_or(0, |s| s.written)
    }

    pub fn stale(&self, segment: u32) -> u64 {
        self.segments
            .get(&segment)
            .map_or(0, |s| s.written.saturating_sub(s.valid_count))
    }

    /// Valid block indexes of a segment in ascending order.
    pub fn valid_blocks(&self, segment: u32) -> Vec<usize> {
        self.segments
            .get(&segment)
            .map(|s| s.valid.iter_ones().collect())
            .unwrap_or_default()
    }

    /// Valid count recomputed from the bitmap, for cross-checking the
    /// incremental counter.
    pub fn recount(&self, segment: u32) -> u64 {
        self.segments.get(&segment).map_or(0, |s| s.valid.count_ones() as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcPolicy {
    /// Clean while free zones per drive fall below this fraction.
    pub threshold: f64,
    /// Free zones per drive kept back for cleaning itself; user writes
    /// wait while free space is at or below this.
    pub reserve_zones: u32,
}

impl Default for GcPolicy {
    fn default() -> Self {
        GcPolicy {
            threshold: 0.15,
            reserve_zones: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub segment: u32,
    pub sealed: bool,
    pub stale: u64,
}

impl GcPolicy {
    pub fn new(threshold: f64, reserve_zones: u32) -> Result<Self, GcError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(GcError::InvalidPolicy(format!("threshold {threshold} not in (0,1)")));
        }
        Ok(GcPolicy {
            threshold,
            reserve_zones,
        })
    }

    pub fn should_collect(&self, free_zones: u32, total_zones: u32) -> bool {
        (free_zones as f64) < self.threshold * total_zones as f64 || free_zones <= self.reserve_zones
    }

    pub fn admission_blocked(&self, free_zones: u32) -> bool {
        free_zones <= self.reserve_zones
    }

    /// Sealed segment with the most stale blocks; ties go to the lowest id.
    pub fn select_victim(&self, candidates: impl IntoIterator<Item = Candidate>) -> Result<u32, GcError> {
        candidates
            .into_iter()
            .filter(|c| c.sealed && c.stale > 0)
            .max_by(|a, b| a.stale.cmp(&b.stale).then(b.segment.cmp(&a.segment)))
            .map(|c| c.segment)
            .ok_or(GcError::NoSealedSegment)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GcStats {
    pub runs: u64,
    pub blocks_moved: u64,
    pub zones_reset: u64,
    pub user_blocks: u64,
    pub gc_blocks: u64,
}

impl GcStats {
    /// Blocks written by users plus blocks rewritten by cleaning, over
    /// blocks written by users.
    pub fn write_amplification(&self) -> f64 {
        if self.user_blocks == 0 {
            return 1.0;
        }
        (self.user_blocks + self.gc_blocks) as f64 / self.user_blocks as f64
    }
}
