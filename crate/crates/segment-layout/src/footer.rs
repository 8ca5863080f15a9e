//! Footer-region encoding: the metadata of every data-region block of a
//! zone, in offset order.
//!
//! Each 4 KiB footer block holds up to 204 entries of 20 bytes (LBA u64,
//! timestamp u64, stripe id u32) in bytes `0..4080`, then a trailer:
//! `4080..4084` magic, `4084..4088` block index within the footer,
//! `4088..4090` entry count, `4090..4092` zero, `4092..4096` CRC-32 of
//! bytes `0..4092`. Unused entry slots are zero.

use zns_device::{zeroed_page, Page, BLOCK_SIZE};

use crate::{BlockMeta, LayoutError, ENTRIES_PER_BLOCK, META_ENTRY_BYTES};

pub const FOOTER_MAGIC: u32 = 0x5446_535a;
const TRAILER: usize = ENTRIES_PER_BLOCK * META_ENTRY_BYTES;

pub fn serialize_footer(entries: &[BlockMeta]) -> Vec<Box<Page>> {
    entries
        .chunks(ENTRIES_PER_BLOCK)
        .enumerate()
        .map(|(i, chunk)| {
            let mut b = zeroed_page();
            for (j, e) in chunk.iter().enumerate() {
                b[j * META_ENTRY_BYTES..(j + 1) * META_ENTRY_BYTES].copy_from_slice(&e.to_bytes());
            }
            b[TRAILER..TRAILER + 4].copy_from_slice(&FOOTER_MAGIC.to_le_bytes());
            b[TRAILER + 4..TRAILER + 8].copy_from_slice(&(i as u32).to_le_bytes());
            b[TRAILER + 8..TRAILER + 10].copy_from_slice(&(chunk.len() as u16).to_le_bytes());
            let crc = crc32fast::hash(&b[..BLOCK_SIZE - 4]);
            b[BLOCK_SIZE - 4..].copy_from_slice(&crc.to_le_bytes());
            b
        })
        .collect()
}

/// Decodes footer blocks given in order; `expected` is the number of
/// entries the footer must hold.
pub fn parse_footer<B: AsRef<[u8]>>(blocks: &[B], expected: usize) -> Result<Vec<BlockMeta>, LayoutError> {
    let corrupt = |m: String| LayoutError::CorruptFooter(m);
    if blocks.len() != expected.div_ceil(ENTRIES_PER_BLOCK) {
        return Err(corrupt(format!("{} blocks for {expected} entries", blocks.len())));
    }
    let mut out = Vec::with_capacity(expected);
    for (i, b) in blocks.iter().enumerate() {
        let b = b.as_ref();
        if b.len() != BLOCK_SIZE {
            return Err(corrupt("wrong block size".into()));
        }
        let word = |at: usize| u32::from_le_bytes(b[at..at + 4].try_into().expect("4"));
        if word(TRAILER) != FOOTER_MAGIC {
            return Err(corrupt(format!("block {i}: bad magic")));
        }
        if crc32fast::hash(&b[..BLOCK_SIZE - 4]) != word(BLOCK_SIZE - 4) {
            return Err(corrupt(format!("block {i}: checksum mismatch")));
        }
        if word(TRAILER + 4) != i as u32 {
            return Err(corrupt(format!("block {i}: out of order")));
        }
        let n = u16::from_le_bytes([b[TRAILER + 8], b[TRAILER + 9]]) as usize;
        let want = (expected - i * ENTRIES_PER_BLOCK).min(ENTRIES_PER_BLOCK);
        if n != want {
            return Err(corrupt(format!("block {i}: {n} entries, expected {want}")));
        }
        out.extend(
            b[..n * META_ENTRY_BYTES]
                .chunks_exact(META_ENTRY_BYTES)
                .map(BlockMeta::from_bytes),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metas(n: usize) -> Vec<BlockMeta> {
        (0..n as u64)
            .map(|i| BlockMeta::new(i * 4096, i + 1, i as u32 / 3))
            .collect()
    }

    #[test]
    fn block_counts() {
        assert_eq!(serialize_footer(&metas(204)).len(), 1);
        assert_eq!(serialize_footer(&metas(205)).len(), 2);
    }

    #[test]
    fn round_trip() {
        for n in [1, 204, 205, 1000] {
            let m = metas(n);
            let blocks = serialize_footer(&m);
            let refs: Vec<&[u8]> = blocks.iter().map(|b| &b[..]).collect();
            assert_eq!(parse_footer(&refs, n).unwrap(), m);
        }
    }

    #[test]
    fn rejects_damage() {
        let blocks = serialize_footer(&metas(300));
        let mut bad: Vec<Vec<u8>> = blocks.iter().map(|b| b.to_vec()).collect();
        bad[1][7] ^= 1;
        assert!(parse_footer(&bad, 300).is_err());
        let swapped = vec![blocks[1].to_vec(), blocks[0].to_vec()];
        assert!(parse_footer(&swapped, 300).is_err());
        assert!(parse_footer(&[vec![0u8; BLOCK_SIZE]], 10).is_err());
    }
}
