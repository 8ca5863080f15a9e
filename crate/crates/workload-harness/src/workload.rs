//! Synthetic request streams.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use zns_device::BLOCK_SIZE;

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Random,
    Sequential,
    Zipf,
}

impl std::str::FromStr for Pattern {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" | "uniform" => Ok(Pattern::Random),
            "sequential" | "seq" => Ok(Pattern::Sequential),
            "zipf" => Ok(Pattern::Zipf),
            _ => Err(HarnessError::Config(format!("unknown pattern {s:?}"))),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pattern::Random => "random",
            Pattern::Sequential => "sequential",
            Pattern::Zipf => "zipf",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeClass {
    pub bytes: u32,
    pub weight: f64,
}

/// Parses `4096:0.75,16384:0.25`; a bare size means weight 1.
pub fn parse_sizes(s: &str) -> Result<Vec<SizeClass>, HarnessError> {
    s.split(',')
        .map(|part| {
            let bad = || HarnessError::Config(format!("bad size class {part:?}"));
            let (b, w) = match part.split_once(':') {
                Some((b, w)) => (b, w.trim().parse::<f64>().map_err(|_| bad())?),
                None => (part, 1.0),
            };
            Ok(SizeClass {
                bytes: parse_bytes(b).ok_or_else(bad)? as u32,
                weight: w,
            })
        })
        .collect()
}

/// `4096`, `16K`, `64KiB`, `1G`, `1.5GiB`.
pub fn parse_bytes(s: &str) -> Option<u64> {
    let s = s.trim();
    let split = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let scale: u64 = match unit.to_ascii_lowercase().trim_end_matches("ib").trim_end_matches('b') {
        "" => 1,
        "k" => 1 << 10,
        "m" => 1 << 20,
        "g" => 1 << 30,
        "t" => 1 << 40,
        _ => return None,
    };
    let v: f64 = num.trim().parse().ok()?;
    (v >= 0.0).then(|| (v * scale as f64).round() as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    /// Zipf exponent.
    pub theta: f64,
    pub sizes: Vec<SizeClass>,
    pub read_fraction: f64,
    pub qd: usize,
    pub total_bytes: u64,
    pub seed: u64,
    /// Write the whole logical space once before measuring.
    pub prefill: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            pattern: Pattern::Random,
            theta: 0.99,
            sizes: vec![SizeClass {
                bytes: BLOCK_SIZE as u32,
                weight: 1.0,
            }],
            read_fraction: 0.0,
            qd: 16,
            total_bytes: 64 << 20,
            seed: 1,
            prefill: false,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.sizes.is_empty() {
            return bad("no request sizes".into());
        }
        for c in &self.sizes {
            if c.bytes == 0 || !(c.bytes as usize).is_multiple_of(BLOCK_SIZE) {
                return bad(format!("request size {} is not a positive multiple of 4096", c.bytes));
            }
            if !(c.weight >= 0.0) {
                return bad(format!("negative weight for size {}", c.bytes));
            }
        }
        let sum: f64 = self.sizes.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("size weights sum to {sum}, not 1"));
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad("read fraction outside [0, 1]".into());
        }
        if self.qd == 0 {
            return bad("queue depth must be positive".into());
        }
        if !(self.theta > 0.0) {
            return bad("zipf exponent must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Request {
    pub op: Op,
    pub lba: u64,
    pub blocks: u32,
}

/// Deterministic request stream over `logical_blocks`, ending once
/// `total_bytes` have been issued.
pub struct Generator {
    rng: ChaCha8Rng,
    pattern: Pattern,
    sizes: Vec<u32>,
    pick: WeightedIndex<f64>,
    zipf: Vec<Option<Zipf<f64>>>,
    read_fraction: f64,
    logical_blocks: u64,
    cursor: u64,
    remaining: u64,
}

impl Generator {
    pub fn new(spec: &WorkloadSpec, logical_blocks: u64) -> Result<Generator, HarnessError> {
        spec.validate()?;
        let sizes: Vec<u32> = spec.sizes.iter().map(|c| c.bytes / BLOCK_SIZE as u32).collect();
        if sizes.iter().any(|&b| b as u64 > logical_blocks) {
            return Err(HarnessError::Config("request larger than the volume".into()));
        }
        let pick =
            WeightedIndex::new(spec.sizes.iter().map(|c| c.weight)).map_err(|e| HarnessError::Config(e.to_string()))?;
        let zipf = sizes
            .iter()
            .map(|&b| {
                (spec.pattern == Pattern::Zipf)
                    .then(|| Zipf::new((logical_blocks / b as u64) as f64, spec.theta))
                    .transpose()
                    .map_err(|e| HarnessError::Config(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Generator {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            pattern: spec.pattern,
            sizes,
            pick,
            zipf,
            read_fraction: spec.read_fraction,
            logical_blocks,
            cursor: 0,
            remaining: spec.total_bytes,
        })
    }
}

impl Iterator for Generator {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        if self.remaining == 0 {
            return None;
        }
        let class = self.pick.sample(&mut self.rng);
        let blocks = self.sizes[class];
        let slots = self.logical_blocks / blocks as u64;
        let lba = match self.pattern {
            Pattern::Random => self.rng.random_range(0..slots) * blocks as u64,
            // rank 1 is the hottest; ranks map straight onto offsets so hot
            // data shares mapping groups
            Pattern::Zipf => {
                let r = self.zipf[class].as_ref().expect("built for zipf").sample(&mut self.rng);
                (r as u64 - 1).min(slots - 1) * blocks as u64
            }
            Pattern::Sequential => {
                if self.cursor + blocks as u64 > self.logical_blocks {
                    self.cursor = 0;
                }
                let l = self.cursor;
                self.cursor += blocks as u64;
                l
            }
        };
        let op = if self.read_fraction > 0.0 && self.rng.random::<f64>() < self.read_fraction {
            Op::Read
        } else {
            Op::Write
        };
        self.remaining = self.remaining.saturating_sub(blocks as u64 * BLOCK_SIZE as u64);
        Some(Request { op, lba, blocks })
    }
}
