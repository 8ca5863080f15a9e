//! Block payloads and the in-memory model every read is checked against.
//!
//! A written block carries its LBA in bytes `0..8`, a write tag in bytes
//! `8..16` and a keyed pseudorandom fill after that, so a read can be
//! traced back to the exact write that produced it. Tags grow with
//! submission order.

use raid_engine::{EngineError, Payload};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zns_device::{zeroed_page, Page, BLOCK_SIZE};

/// Content of written blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PayloadMode {
    /// Self-describing blocks; reads are checked byte for byte.
    Full,
    /// All-zero blocks, stored sparsely. For large fills where only
    /// timing and metadata matter; reads are checked for presence only.
    Zero,
}

pub fn block_payload(seed: u64, lba: u64, tag: u64) -> Box<Page> {
    let mut p = zeroed_page();
    p[..8].copy_from_slice(&lba.to_le_bytes());
    p[8..16].copy_from_slice(&tag.to_le_bytes());
    let key = seed ^ tag.rotate_left(29) ^ lba.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(key).fill_bytes(&mut p[16..]);
    p
}

/// `(lba, tag)` stamped into a block.
pub fn stamp(page: &Page) -> (u64, u64) {
    (
        u64::from_le_bytes(page[..8].try_into().expect("8")),
        u64::from_le_bytes(page[8..16].try_into().expect("8")),
    )
}

/// Newest submitted and newest acknowledged tag per LBA; 0 means none.
#[derive(Clone, Debug)]
pub struct Shadow {
    seed: u64,
    mode: PayloadMode,
    submitted: Vec<u64>,
    acked: Vec<u64>,
    next_tag: u64,
}

impl Shadow {
    pub fn new(logical_blocks: u64, seed: u64, mode: PayloadMode) -> Shadow {
        Shadow {
            seed,
            mode,
            submitted: vec![0; logical_blocks as usize],
            acked: vec![0; logical_blocks as usize],
            next_tag: 1,
        }
    }

    pub fn mode(&self) -> PayloadMode {
        self.mode
    }

    pub fn logical_blocks(&self) -> u64 {
        self.submitted.len() as u64
    }

    /// Assigns tags to a new write and returns its payloads and first tag.
    pub fn begin_write(&mut self, lba: u64, n: u32) -> (Vec<Payload>, u64) {
        let tag = self.next_tag;
        self.next_tag += n as u64;
        let data = (0..n as u64)
            .map(|i| {
                if let Some(s) = self.submitted.get_mut((lba + i) as usize) {
                    *s = tag + i;
                }
                match self.mode {
                    PayloadMode::Full => Some(block_payload(self.seed, lba + i, tag + i)),
                    PayloadMode::Zero => None,
                }
            })
            .collect();
        (data, tag)
    }

    pub fn ack_write(&mut self, lba: u64, n: u32, tag: u64) {
        for i in 0..n as u64 {
            if let Some(a) = self.acked.get_mut((lba + i) as usize) {
                *a = (*a).max(tag + i);
            }
        }
    }

    /// Oldest tag a read submitted now may return.
    pub fn floor(&self, lba: u64) -> u64 {
        self.acked.get(lba as usize).copied().unwrap_or(0)
    }

    pub fn newest(&self, lba: u64) -> u64 {
        self.submitted.get(lba as usize).copied().unwrap_or(0)
    }

    /// Whether `got` is an acceptable result for a read of `lba` submitted
    /// when the acknowledged tag was `floor`.
    pub fn check(&self, lba: u64, floor: u64, got: Result<&Payload, &EngineError>) -> bool {
        match got {
            Err(EngineError::UnmappedLba(_)) => floor == 0,
            Err(_) => false,
            Ok(p) => match self.mode {
                PayloadMode::Zero => p.is_none() && self.newest(lba) > 0,
                PayloadMode::Full => {
                    let Some(page) = p else {
                        return false;
                    };
                    let (l, tag) = stamp(page);
                    l == lba
                        && tag >= floor.max(1)
                        && tag <= self.newest(lba)
                        && **page == *block_payload(self.seed, lba, tag)
                }
            },
        }
    }

    /// Expected content of `lba` once every write has completed.
    pub fn expected(&self, lba: u64) -> Option<Payload> {
        let tag = self.newest(lba);
        (tag > 0).then(|| match self.mode {
            PayloadMode::Full => Some(block_payload(self.seed, lba, tag)),
            PayloadMode::Zero => None,
        })
    }
}

/// Running CRC-32 over `(lba, content)` of mapped blocks in LBA order.
#[derive(Default)]
pub struct Checksum(crc32fast::Hasher);

impl Checksum {
    pub fn add(&mut self, lba: u64, p: &Payload) {
        self.0.update(&lba.to_le_bytes());
        match p {
            Some(b) => self.0.update(&b[..]),
            None => self.0.update(&[0u8; BLOCK_SIZE]),
        }
    }

    pub fn finish(self) -> u32 {
        self.0.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_is_keyed_and_stamped() {
        let a = block_payload(1, 5, 9);
        assert_eq!(stamp(&a), (5, 9));
        assert_eq!(a, block_payload(1, 5, 9));
        assert_ne!(a[16..], block_payload(2, 5, 9)[16..]);
        assert_ne!(a[16..], block_payload(1, 5, 10)[16..]);
    }

    #[test]
    fn read_window() {
        let mut s = Shadow::new(10, 3, PayloadMode::Full);
        let (d1, t1) = s.begin_write(4, 1);
        s.ack_write(4, 1, t1);
        let floor = s.floor(4);
        let (d2, _) = s.begin_write(4, 1);
        // old or in-flight data are both fine; anything else is not
        assert!(s.check(4, floor, Ok(&d1[0])));
        assert!(s.check(4, floor, Ok(&d2[0])));
        assert!(!s.check(5, 0, Ok(&d1[0])));
        assert!(!s.check(4, floor, Ok(&None)));
        assert!(!s.check(4, floor, Err(&EngineError::UnmappedLba(4))));
        assert!(s.check(7, 0, Err(&EngineError::UnmappedLba(7))));
        // a newer ack raises the floor
        s.ack_write(4, 1, t1 + 1);
        assert!(!s.check(4, s.floor(4), Ok(&d1[0])));
    }
}
