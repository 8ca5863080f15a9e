//! Placement of stripe positions on drives.
//!
//! Positions `0..k` are data chunks and `k..k+m` parity chunks. RAID-5 and
//! RAID-6 rotate the whole stripe left by its sequence number, so parity
//! walks backwards across drives; every other scheme keeps position `p` on
//! drive `p`, which puts RAID-4 parity on the last drive.

use erasure_codec::{RaidKind, RaidScheme};

fn rotates(scheme: &RaidScheme) -> bool {
    matches!(scheme.kind, RaidKind::Raid5 | RaidKind::Raid6)
}

pub fn drive_of_position(scheme: &RaidScheme, seq: u32, position: usize) -> usize {
    let n = scheme.width();
    if rotates(scheme) {
        (position + n - seq as usize % n) % n
    } else {
        position
    }
}

pub fn position_of_drive(scheme: &RaidScheme, seq: u32, drive: usize) -> usize {
    let n = scheme.width();
    if rotates(scheme) {
        (drive + seq as usize) % n
    } else {
        drive
    }
}

/// Drives holding parity for stripe `seq`, in parity-row order.
pub fn parity_drives(scheme: &RaidScheme, seq: u32) -> Vec<usize> {
    (scheme.k..scheme.width())
        .map(|p| drive_of_position(scheme, seq, p))
        .collect()
}
