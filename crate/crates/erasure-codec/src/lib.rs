//! Stripe erasure coding.
//!
//! Every scheme is expressed as a systematic linear code over GF(2^8): the
//! first `k` positions of a stripe are the data chunks and the last `m` are
//! parity. Parity row `j` applies coefficient `2^(i*j)` to data chunk `i`,
//! so row 0 is plain XOR (RAID-4/5 parity, RAID-6 P) and row 1 is the RAID-6
//! Q syndrome. RAID-01 uses identity rows, making each parity chunk a copy of
//! one data chunk.

pub mod gf256;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RaidKind {
    Raid0,
    Raid01,
    Raid4,
    Raid5,
    Raid6,
}

impl RaidKind {
    pub const ALL: [RaidKind; 5] = [
        RaidKind::Raid0,
        RaidKind::Raid01,
        RaidKind::Raid4,
        RaidKind::Raid5,
        RaidKind::Raid6,
    ];

    pub fn code(self) -> u8 {
        match self {
            RaidKind::Raid0 => 0,
            RaidKind::Raid01 => 1,
            RaidKind::Raid4 => 4,
            RaidKind::Raid5 => 5,
            RaidKind::Raid6 => 6,
        }
    }

    pub fn from_code(c: u8) -> Option<RaidKind> {
        RaidKind::ALL.into_iter().find(|k| k.code() == c)
    }
}

impl fmt::Display for RaidKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RaidKind::Raid0 => "raid0",
            RaidKind::Raid01 => "raid01",
            RaidKind::Raid4 => "raid4",
            RaidKind::Raid5 => "raid5",
            RaidKind::Raid6 => "raid6",
        };
        f.write_str(s)
    }
}

impl FromStr for RaidKind {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "raid0" => Ok(RaidKind::Raid0),
            "raid01" | "raid10" => Ok(RaidKind::Raid01),
            "raid4" => Ok(RaidKind::Raid4),
            "raid5" => Ok(RaidKind::Raid5),
            "raid6" => Ok(RaidKind::Raid6),
            _ => Err(CodecError::InvalidScheme(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RaidScheme {
    pub kind: RaidKind,
    pub k: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("chunk sizes differ or the chunk count is wrong")]
    SizeMismatch,
    #[error("need {need} chunks, got {got}")]
    InsufficientChunks { need: usize, got: usize },
    #[error("invalid or duplicate stripe position {0}")]
    InvalidPosition(usize),
    #[error("the supplied chunks cannot reconstruct the stripe")]
    Unrecoverable,
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
}

impl RaidScheme {
    pub fn new(kind: RaidKind, k: usize, m: usize) -> Result<Self, CodecError> {
        let ok = k >= 1
            && k + m <= 255
            && match kind {
                RaidKind::Raid0 => m == 0,
                RaidKind::Raid01 => m == k,
                RaidKind::Raid4 | RaidKind::Raid5 => m == 1,
                RaidKind::Raid6 => m == 2,
            };
        if ok {
            Ok(RaidScheme { kind, k, m })
        } else {
            Err(CodecError::InvalidScheme(format!("{kind} with k={k} m={m}")))
        }
    }

    /// The four-drive layout for each kind.
    pub fn four_drive(kind: RaidKind) -> Self {
        let (k, m) = match kind {
            RaidKind::Raid0 => (4, 0),
            RaidKind::Raid01 => (2, 2),
            RaidKind::Raid4 | RaidKind::Raid5 => (3, 1),
            RaidKind::Raid6 => (2, 2),
        };
        RaidScheme::new(kind, k, m).expect("valid")
    }

    pub fn width(&self) -> usize {
        self.k + self.m
    }

    /// Whether any `k` surviving positions suffice. False only for RAID-01.
    pub fn is_mds(&self) -> bool {
        self.kind != RaidKind::Raid01
    }

    /// Coefficient applied to data chunk `i` in parity row `j`.
    pub fn coefficient(&self, j: usize, i: usize) -> u8 {
        match self.kind {
            RaidKind::Raid01 => (i == j) as u8,
            _ => gf256::pow2(i * j),
        }
    }

    /// Generator row for stripe position `p`.
    fn row(&self, p: usize) -> Vec<u8> {
        if p < self.k {
            (0..self.k).map(|i| (i == p) as u8).collect()
        } else {
            (0..self.k).map(|i| self.coefficient(p - self.k, i)).collect()
        }
    }

    /// Whether the data can be rebuilt from exactly these positions.
    pub fn decodable(&self, positions: &[usize]) -> bool {
        self.decode_matrix(positions).is_ok()
    }

    /// Whether the stripe survives losing `lost` positions.
    pub fn tolerates(&self, lost: &[usize]) -> bool {
        let alive: Vec<usize> = (0..self.width()).filter(|p| !lost.contains(p)).collect();
        self.choose_survivors(&alive).is_some()
    }

    /// Picks `k` positions from `alive` that decode, preferring low indices.
    pub fn choose_survivors(&self, alive: &[usize]) -> Option<Vec<usize>> {
        if alive.len() < self.k {
            return None;
        }
        let mut pick: Vec<usize> = (0..self.k).collect();
        loop {
            let set: Vec<usize> = pick.iter().map(|&i| alive[i]).collect();
            if self.decodable(&set) {
                return Some(set);
            }
            // next k-combination of alive indices
            let n = alive.len();
            let mut i = self.k;
            loop {
                if i == 0 {
                    return None;
                }
                i -= 1;
                if pick[i] < n - self.k + i {
                    break;
                }
            }
            pick[i] += 1;
            for j in i + 1..self.k {
                pick[j] = pick[j - 1] + 1;
            }
        }
    }

    fn decode_matrix(&self, positions: &[usize]) -> Result<Vec<Vec<u8>>, CodecError> {
        if positions.len() != self.k {
            return Err(CodecError::InsufficientChunks {
                need: self.k,
                got: positions.len(),
            });
        }
        for (i, &p) in positions.iter().enumerate() {
            if p >= self.width() || positions[..i].contains(&p) {
                return Err(CodecError::InvalidPosition(p));
            }
        }
        let a: Vec<Vec<u8>> = positions.iter().map(|&p| self.row(p)).collect();
        gf256::invert(a).ok_or(CodecError::Unrecoverable)
    }
}

impl fmt::Display for RaidScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}+{})", self.kind, self.k, self.m)
    }
}

fn check_sizes<T: AsRef<[u8]>>(chunks: &[T]) -> Result<usize, CodecError> {
    let len = chunks.first().map_or(0, |c| c.as_ref().len());
    if chunks.iter().any(|c| c.as_ref().len() != len) {
        return Err(CodecError::SizeMismatch);
    }
    Ok(len)
}

/// Computes the `m` parity chunks for `k` data chunks.
pub fn encode<T: AsRef<[u8]>>(scheme: &RaidScheme, data: &[T]) -> Result<Vec<Vec<u8>>, CodecError> {
    if data.len() != scheme.k {
        return Err(CodecError::SizeMismatch);
    }
    let len = check_sizes(data)?;
    Ok((0..scheme.m)
        .map(|j| {
            let mut out = vec![0u8; len];
            for (i, d) in data.iter().enumerate() {
                gf256::mul_acc(&mut out, d.as_ref(), scheme.coefficient(j, i));
            }
            out
        })
        .collect())
}

/// Recovers the `k` data chunks from exactly `k` (position, chunk) pairs.
pub fn decode<T: AsRef<[u8]>>(scheme: &RaidScheme, available: &[(usize, T)]) -> Result<Vec<Vec<u8>>, CodecError> {
    let positions: Vec<usize> = available.iter().map(|(p, _)| *p).collect();
    let chunks: Vec<&[u8]> = available.iter().map(|(_, c)| c.as_ref()).collect();
    let len = check_sizes(&chunks)?;
    if positions.len() != scheme.k {
        return Err(CodecError::InsufficientChunks {
            need: scheme.k,
            got: positions.len(),
        });
    }
    // Data chunks that are present pass straight through.
    if positions.iter().enumerate().all(|(i, &p)| p == i) {
        return Ok(chunks.iter().map(|c| c.to_vec()).collect());
    }
    if scheme.m == 1 && scheme.kind != RaidKind::Raid01 {
        return decode_xor(scheme, &positions, &chunks, len);
    }
    let inv = scheme.decode_matrix(&positions)?;
    Ok(inv
        .iter()
        .map(|row| {
            let mut out = vec![0u8; len];
            for (r, c) in row.iter().zip(&chunks) {
                gf256::mul_acc(&mut out, c, *r);
            }
            out
        })
        .collect())
}

fn decode_xor(
    scheme: &RaidScheme,
    positions: &[usize],
    chunks: &[&[u8]],
    len: usize,
) -> Result<Vec<Vec<u8>>, CodecError> {
    for (i, &p) in positions.iter().enumerate() {
        if p >= scheme.width() || positions[..i].contains(&p) {
            return Err(CodecError::InvalidPosition(p));
        }
    }
    let mut out: Vec<Option<Vec<u8>>> = vec![None; scheme.k];
    let mut missing = vec![0u8; len];
    for (&p, c) in positions.iter().zip(chunks) {
        gf256::xor_into(&mut missing, c);
        if p < scheme.k {
            out[p] = Some(c.to_vec());
        }
    }
    if let Some(slot) = out.iter_mut().find(|o| o.is_none()) {
        *slot = Some(missing);
    }
    Ok(out.into_iter().map(|o| o.expect("filled")).collect())
}

/// Rebuilds the chunk at stripe position `wanted`, data or parity.
pub fn reconstruct<T: AsRef<[u8]>>(
    scheme: &RaidScheme,
    available: &[(usize, T)],
    wanted: usize,
) -> Result<Vec<u8>, CodecError> {
    if wanted >= scheme.width() {
        return Err(CodecError::InvalidPosition(wanted));
    }
    if let Some((_, c)) = available.iter().find(|(p, _)| *p == wanted) {
        return Ok(c.as_ref().to_vec());
    }
    let mut data = decode(scheme, available)?;
    if wanted < scheme.k {
        Ok(data.swap_remove(wanted))
    } else {
        Ok(encode(scheme, &data)?.swap_remove(wanted - scheme.k))
    }
}

/// Per-block metadata lanes of one chunk: an LBA and a timestamp for each
/// of its `C` blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetaVector {
    pub lbas: Vec<u64>,
    pub timestamps: Vec<u64>,
}

impl MetaVector {
    pub fn new(lbas: Vec<u64>, timestamps: Vec<u64>) -> Self {
        MetaVector { lbas, timestamps }
    }

    pub fn len(&self) -> usize {
        self.lbas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lbas.is_empty()
    }

    fn to_bytes(&self) -> Result<Vec<u8>, CodecError> {
        if self.lbas.len() != self.timestamps.len() {
            return Err(CodecError::SizeMismatch);
        }
        let mut out = Vec::with_capacity(16 * self.lbas.len());
        for v in self.lbas.iter().chain(&self.timestamps) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    fn from_bytes(bytes: &[u8]) -> MetaVector {
        let vals: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let n = vals.len() / 2;
        MetaVector {
            lbas: vals[..n].to_vec(),
            timestamps: vals[n..].to_vec(),
        }
    }
}

/// Applies the stripe code to the little-endian bytes of the LBA and
/// timestamp lanes, giving one parity vector per parity chunk.
pub fn encode_meta(scheme: &RaidScheme, meta: &[MetaVector]) -> Result<Vec<MetaVector>, CodecError> {
    let bytes = meta.iter().map(MetaVector::to_bytes).collect::<Result<Vec<_>, _>>()?;
    Ok(encode(scheme, &bytes)?
        .iter()
        .map(|b| MetaVector::from_bytes(b))
        .collect())
}

pub fn decode_meta(scheme: &RaidScheme, available: &[(usize, &MetaVector)]) -> Result<Vec<MetaVector>, CodecError> {
    let bytes = available
        .iter()
        .map(|(p, m)| m.to_bytes().map(|b| (*p, b)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(decode(scheme, &bytes)?
        .iter()
        .map(|b| MetaVector::from_bytes(b))
        .collect())
}

/// Encodes one 8-byte lane across the `k` data values of a stripe.
pub fn encode_lane(scheme: &RaidScheme, values: &[u64]) -> Vec<u64> {
    let bytes: Vec<[u8; 8]> = values.iter().map(|v| v.to_le_bytes()).collect();
    (0..scheme.m)
        .map(|j| {
            let mut out = [0u8; 8];
            for (i, b) in bytes.iter().enumerate() {
                gf256::mul_acc(&mut out, b, scheme.coefficient(j, i));
            }
            u64::from_le_bytes(out)
        })
        .collect()
}

/// Rebuilds the lane value at position `wanted` from `k` survivors.
pub fn reconstruct_lane(scheme: &RaidScheme, available: &[(usize, u64)], wanted: usize) -> Result<u64, CodecError> {
    let bytes: Vec<(usize, [u8; 8])> = available.iter().map(|(p, v)| (*p, v.to_le_bytes())).collect();
    let out = reconstruct(scheme, &bytes, wanted)?;
    Ok(u64::from_le_bytes(out.try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r5() -> RaidScheme {
        RaidScheme::four_drive(RaidKind::Raid5)
    }

    #[test]
    fn four_drive_configs() {
        let km: Vec<(usize, usize)> = RaidKind::ALL
            .iter()
            .map(|&k| {
                let s = RaidScheme::four_drive(k);
                (s.k, s.m)
            })
            .collect();
        assert_eq!(km, vec![(4, 0), (2, 2), (3, 1), (3, 1), (2, 2)]);
    }

    #[test]
    fn xor_parity_examples() {
        let p = encode(&r5(), &[[0u8; 4], [0; 4], [0; 4]]).unwrap();
        assert_eq!(p, vec![vec![0u8; 4]]);
        let p = encode(&r5(), &[[0x01u8], [0x02], [0x04]]).unwrap();
        assert_eq!(p, vec![vec![0x07]]);
    }

    #[test]
    fn raid5_recovers_middle_chunk() {
        let (a, b, c) = (vec![1u8, 2, 3], vec![9u8, 8, 7], vec![5u8, 5, 5]);
        let p = encode(&r5(), &[&a, &b, &c]).unwrap().remove(0);
        let got = decode(&r5(), &[(0, &a), (2, &c), (3, &p)]).unwrap();
        assert_eq!(got[1], b);
        let expect: Vec<u8> = (0..3).map(|i| a[i] ^ c[i] ^ p[i]).collect();
        assert_eq!(got[1], expect);
    }

    #[test]
    fn raid0_passthrough() {
        let s = RaidScheme::four_drive(RaidKind::Raid0);
        let d: Vec<Vec<u8>> = (0..4).map(|i| vec![i as u8; 3]).collect();
        assert!(encode(&s, &d).unwrap().is_empty());
        let avail: Vec<(usize, &Vec<u8>)> = d.iter().enumerate().collect();
        assert_eq!(decode(&s, &avail).unwrap(), d);
    }

    #[test]
    fn raid6_from_parity_only() {
        let s = RaidScheme::four_drive(RaidKind::Raid6);
        let d = [vec![0x11u8, 0x22, 0x33], vec![0xA0u8, 0x0B, 0xFF]];
        let par = encode(&s, &d).unwrap();
        let got = decode(&s, &[(2, &par[0]), (3, &par[1])]).unwrap();
        assert_eq!(got, d.to_vec());
    }

    #[test]
    fn raid01_mirrors_and_is_not_mds() {
        let s = RaidScheme::four_drive(RaidKind::Raid01);
        let d = [vec![1u8, 2], vec![3u8, 4]];
        assert_eq!(encode(&s, &d).unwrap(), d.to_vec());
        assert_eq!(
            decode(&s, &[(0, &d[0]), (2, &d[0])]).unwrap_err(),
            CodecError::Unrecoverable
        );
        assert!(s.tolerates(&[0, 1]));
        assert!(s.tolerates(&[0, 3]));
        assert!(!s.tolerates(&[0, 2]));
        assert!(!s.tolerates(&[1, 3]));
        assert_eq!(s.choose_survivors(&[0, 2, 3]), Some(vec![0, 3]));
    }

    #[test]
    fn decode_errors() {
        let a = vec![1u8];
        assert_eq!(
            decode(&r5(), &[(0, &a), (1, &a)]).unwrap_err(),
            CodecError::InsufficientChunks { need: 3, got: 2 }
        );
        assert_eq!(
            decode(&r5(), &[(0, &a), (0, &a), (3, &a)]).unwrap_err(),
            CodecError::InvalidPosition(0)
        );
        assert_eq!(
            decode(&r5(), &[(0, &a), (1, &a), (7, &a)]).unwrap_err(),
            CodecError::InvalidPosition(7)
        );
        let b = vec![1u8, 2];
        assert_eq!(encode(&r5(), &[&a, &b, &a]).unwrap_err(), CodecError::SizeMismatch);
    }

    #[test]
    fn meta_parity_examples() {
        let meta: Vec<MetaVector> = [0x1000u64, 0x2000, 0x3000]
            .iter()
            .map(|&l| MetaVector::new(vec![l], vec![0]))
            .collect();
        let p = encode_meta(&r5(), &meta).unwrap();
        assert_eq!(p[0].lbas, vec![0x0000]);
        assert_eq!(p[0].timestamps, vec![0]);
        assert_eq!(encode_lane(&r5(), &[0x1000, 0x2000, 0x3000]), vec![0]);
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("RAID-5".parse::<RaidKind>().unwrap(), RaidKind::Raid5);
        assert_eq!("raid01".parse::<RaidKind>().unwrap(), RaidKind::Raid01);
        assert!("raid7".parse::<RaidKind>().is_err());
        assert!(RaidScheme::new(RaidKind::Raid5, 3, 2).is_err());
        for k in RaidKind::ALL {
            assert_eq!(RaidKind::from_code(k.code()), Some(k));
        }
    }
}
