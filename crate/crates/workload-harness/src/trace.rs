//! Block traces: `time_us,op,offset,length`, one request per line, with
//! byte offsets and lengths.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use zns_device::{SimTime, BLOCK_SIZE};

use crate::workload::{Op, Request};
use crate::HarnessError;

pub const TRACE_HEADER: &str = "time_us,op,offset,length";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_us: u64,
    pub op: Op,
    pub offset: u64,
    pub length: u64,
}

impl TraceRecord {
    pub fn request(&self) -> Request {
        Request {
            op: self.op,
            lba: self.offset / BLOCK_SIZE as u64,
            blocks: (self.length / BLOCK_SIZE as u64) as u32,
        }
    }
}

fn err(line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::TraceParse { line, msg: msg.into() }
}

pub fn parse_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| err(line, e.to_string()))?;
        if i == 0 {
            let header: Vec<&str> = row.iter().collect();
            if header.join(",") != TRACE_HEADER {
                return Err(err(line, format!("expected header {TRACE_HEADER:?}")));
            }
            continue;
        }
        if row.len() != 4 {
            return Err(err(line, format!("expected 4 fields, found {}", row.len())));
        }
        let num = |j: usize, name: &str| -> Result<u64, HarnessError> {
            row[j]
                .parse::<u64>()
                .map_err(|_| err(line, format!("{name} {:?} is not a non-negative integer", &row[j])))
        };
        let op = match &row[1] {
            "R" | "r" => Op::Read,
            "W" | "w" => Op::Write,
            other => return Err(err(line, format!("op {other:?} is neither R nor W"))),
        };
        let rec = TraceRecord {
            time_us: num(0, "time_us")?,
            op,
            offset: num(2, "offset")?,
            length: num(3, "length")?,
        };
        let bs = BLOCK_SIZE as u64;
        if !rec.offset.is_multiple_of(bs) || !rec.length.is_multiple_of(bs) || rec.length == 0 {
            return Err(err(line, "offset and length must be positive multiples of 4096"));
        }
        if out.last().is_some_and(|p| p.time_us > rec.time_us) {
            return Err(err(line, "arrival times go backwards"));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(out: W, records: &[TraceRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER.split(','))?;
    for r in records {
        let op = match r.op {
            Op::Read => "R",
            Op::Write => "W",
        };
        w.write_record([
            r.time_us.to_string(),
            op.into(),
            r.offset.to_string(),
            r.length.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Checks every record fits a volume of `logical_blocks` and converts
/// arrival times to nanoseconds from the first record.
pub fn schedule(records: &[TraceRecord], logical_blocks: u64) -> Result<Vec<(SimTime, Request)>, HarnessError> {
    let t0 = records.first().map_or(0, |r| r.time_us);
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let q = r.request();
            if q.lba + q.blocks as u64 > logical_blocks {
                return Err(err(
                    i + 2,
                    format!("request ends at byte {} past the volume", r.offset + r.length),
                ));
            }
            Ok(((r.time_us - t0) * 1000, q))
        })
        .collect()
}

/// Converts a public cloud block trace (`device,opcode,offset,length,
/// timestamp_us`, no header) into the native format. Offsets are folded
/// into `capacity_bytes` and rounded to whole blocks.
pub fn convert_cloud_trace<R: BufRead>(
    input: R,
    device: Option<&str>,
    capacity_bytes: u64,
) -> Result<Vec<TraceRecord>, HarnessError> {
    let bs = BLOCK_SIZE as u64;
    let cap = capacity_bytes / bs * bs;
    if cap == 0 {
        return Err(HarnessError::Config("capacity below one block".into()));
    }
    let mut out = Vec::new();
    let mut t0 = None;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        let f: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if f.len() < 5 || f[0].is_empty() {
            continue;
        }
        if device.is_some_and(|d| d != f[0]) {
            continue;
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| err(i + 1, format!("{s:?} is not an integer")))
        };
        let op = match f[1] {
            "R" | "r" => Op::Read,
            "W" | "w" => Op::Write,
            other => return Err(err(i + 1, format!("op {other:?} is neither R nor W"))),
        };
        let (offset, length, ts) = (num(f[2])?, num(f[3])?, num(f[4])?);
        let start = offset / bs * bs;
        let end = (offset + length.max(1)).div_ceil(bs) * bs;
        let length = (end - start).min(cap);
        let t0 = *t0.get_or_insert(ts);
        out.push(TraceRecord {
            time_us: ts.saturating_sub(t0),
            op,
            offset: (start % cap).min(cap - length),
            length,
        });
    }
    // source traces are not always sorted
    out.sort_by_key(|r| r.time_us);
    Ok(out)
}
