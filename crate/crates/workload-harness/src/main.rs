use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use workload_harness::config::{L2pCap, RunConfig};
use workload_harness::experiments::{self, admissible_failures, BenchOptions, CrashOptions, CrashPoints, Row, Setup};
use workload_harness::shadow::PayloadMode;
use workload_harness::trace::{convert_cloud_trace, parse_trace, write_trace};
use workload_harness::workload::{parse_bytes, parse_sizes, Pattern, WorkloadSpec};
use workload_harness::HarnessError;
use zns_device::BLOCK_SIZE;

#[derive(Parser)]
#[command(name = "znsraid", version, about = "Drive a simulated ZNS RAID volume")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML file with [device], [volume] and [workload] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Queue depth; a comma list runs once per value.
    #[arg(long, global = true, value_delimiter = ',')]
    qd: Vec<usize>,
    /// raid0, raid01, raid4, raid5 or raid6.
    #[arg(long, global = true)]
    scheme: Option<String>,
    #[arg(long, global = true)]
    drives: Option<usize>,
    /// Small chunk size, e.g. 4K.
    #[arg(long, global = true, value_parser = bytes_arg)]
    chunk_small: Option<u64>,
    #[arg(long, global = true, value_parser = bytes_arg)]
    chunk_large: Option<u64>,
    /// Open small-chunk segments.
    #[arg(long, global = true)]
    ns: Option<usize>,
    /// Open large-chunk segments.
    #[arg(long, global = true)]
    nl: Option<usize>,
    #[arg(long, global = true)]
    group_size: Option<u32>,
    /// Resident mapping groups: full, a count, or a percentage.
    #[arg(long, global = true)]
    l2p_cap: Option<L2pCap>,
    /// Spare space over logical space, as a fraction or a percentage.
    #[arg(long, global = true, value_parser = fraction_arg)]
    reserved: Option<f64>,
    /// hybrid, zone-write-only or zone-append-only.
    #[arg(long, global = true)]
    layout: Option<String>,
    #[arg(long, global = true)]
    zones: Option<u32>,
    /// Zone capacity in blocks.
    #[arg(long, global = true)]
    zone_capacity: Option<u32>,
    /// CSV output file; stdout if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic closed-loop workload.
    Bench(BenchArgs),
    /// Replay a `time_us,op,offset,length` trace.
    Replay {
        trace: PathBuf,
        /// Ignore arrival times and keep the queue full.
        #[arg(long)]
        closed_loop: bool,
    },
    /// Crash the volume at chosen device commands and check recovery.
    Crashtest(CrashArgs),
    /// Fail drives after a fill and rebuild them onto blank drives.
    Rebuild {
        /// Bytes written before the failure.
        #[arg(long, value_parser = bytes_arg, default_value = "64M")]
        fill: u64,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        fail: Vec<usize>,
        #[arg(long, value_enum, default_value = "full")]
        payload: PayloadMode,
    },
    /// Overwrite the volume several times over and verify it.
    GcStress {
        /// Bytes written as a multiple of the logical size.
        #[arg(long, default_value_t = 5.0)]
        overwrite: f64,
        #[arg(long, default_value = "random")]
        pattern: Pattern,
        /// Size mix, e.g. 4K or 4K:0.75,16K:0.25.
        #[arg(long)]
        sizes: Option<String>,
    },
    /// Print segment regions and the stripe table bound.
    Geometry {
        /// Blocks per chunk; defaults to the small chunk size.
        #[arg(long)]
        chunk_blocks: Option<u32>,
        /// Override the stripe count in the table bound.
        #[arg(long)]
        stripes: Option<u64>,
    },
    /// Turn a `device,opcode,offset,length,timestamp` trace into the native
    /// format.
    ConvertTrace {
        input: PathBuf,
        #[arg(long)]
        device: Option<String>,
        /// Offsets are folded into this many bytes.
        #[arg(long, value_parser = bytes_arg, default_value = "1G")]
        capacity: u64,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    pattern: Option<Pattern>,
    #[arg(long)]
    theta: Option<f64>,
    /// Size mix, e.g. 4K:0.75,16K:0.25.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    read_fraction: Option<f64>,
    /// Bytes issued per run.
    #[arg(long, value_parser = bytes_arg)]
    total: Option<u64>,
    #[arg(long)]
    prefill: bool,
    /// Drives to fail after the prefill.
    #[arg(long, value_delimiter = ',')]
    fail: Vec<usize>,
    /// Read everything back at the end.
    #[arg(long)]
    verify: bool,
    #[arg(long, value_enum, default_value = "full")]
    payload: PayloadMode,
}

#[derive(Args)]
struct CrashArgs {
    /// Write requests in the workload.
    #[arg(long, default_value_t = 64)]
    writes: usize,
    /// Crash points as device command counts; every point if absent.
    #[arg(long, value_delimiter = ',')]
    points: Vec<u64>,
    /// Random crash points instead of every one.
    #[arg(long)]
    random: Option<usize>,
    /// Random crash points taken while cleaning was running.
    #[arg(long)]
    gc_points: Option<usize>,
}

fn bytes_arg(s: &str) -> Result<u64, String> {
    parse_bytes(s).ok_or_else(|| format!("bad byte count {s:?}"))
}

fn fraction_arg(s: &str) -> Result<f64, String> {
    let v = match s.strip_suffix('%') {
        Some(p) => p.trim().parse::<f64>().map(|p| p / 100.0),
        None => s.trim().parse::<f64>(),
    };
    v.map_err(|_| format!("bad fraction {s:?}"))
}

fn chunk_bytes(b: u64) -> Result<u32, HarnessError> {
    u32::try_from(b).map_err(|_| HarnessError::Config(format!("chunk of {b} bytes is too large")))
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let v = &mut c.volume;
        if let Some(s) = &self.scheme {
            v.scheme = s.clone();
        }
        if let Some(d) = self.drives {
            v.drives = d;
        }
        if let Some(b) = self.chunk_small {
            v.chunk_small = chunk_bytes(b)?;
        }
        if let Some(b) = self.chunk_large {
            v.chunk_large = chunk_bytes(b)?;
        }
        if let Some(n) = self.ns {
            v.ns = n;
        }
        if let Some(n) = self.nl {
            v.nl = n;
        }
        if let Some(g) = self.group_size {
            v.group_size = g;
        }
        if let Some(cap) = self.l2p_cap {
            v.l2p_cap = cap;
        }
        if let Some(r) = self.reserved {
            v.reserved = r;
        }
        if let Some(l) = &self.layout {
            v.layout = l.clone();
        }
        if let Some(z) = self.zones {
            c.device.num_zones = z;
        }
        if let Some(z) = self.zone_capacity {
            c.device.zone_capacity_blocks = z;
        }
        if let Some(s) = self.seed {
            c.workload.seed = s;
        }
        Ok(c)
    }

    fn qds(&self, c: &RunConfig) -> Vec<usize> {
        if self.qd.is_empty() {
            vec![c.workload.qd]
        } else {
            self.qd.clone()
        }
    }

    fn output(&self) -> Result<Box<dyn Write>, HarnessError> {
        Ok(match &self.out {
            Some(p) => Box::new(File::create(p)?),
            None => Box::new(io::stdout().lock()),
        })
    }
}

/// Runs the command; `Ok(false)` means a verification failed.
fn run(cli: Cli) -> Result<bool, HarnessError> {
    let common = &cli.common;
    let mut cfg = common.run_config()?;
    let mut ok = true;
    let mut rows = Vec::new();
    match cli.cmd {
        Cmd::Bench(a) => {
            let w = &mut cfg.workload;
            if let Some(p) = a.pattern {
                w.pattern = p;
            }
            if let Some(t) = a.theta {
                w.theta = t;
            }
            if let Some(s) = &a.sizes {
                w.sizes = parse_sizes(s)?;
            }
            if let Some(r) = a.read_fraction {
                w.read_fraction = r;
            }
            if let Some(t) = a.total {
                w.total_bytes = t;
            }
            w.prefill |= a.prefill;
            let setup = Setup::from_run(&cfg)?;
            for qd in common.qds(&cfg) {
                let opts = BenchOptions {
                    workload: WorkloadSpec {
                        qd,
                        ..cfg.workload.clone()
                    },
                    fail: a.fail.clone(),
                    verify: a.verify,
                    payload: a.payload,
                };
                let r = experiments::bench(&setup, &opts)?;
                report_failures(&r.failures);
                ok &= r.passed();
                rows.push(
                    Row::default()
                        .with("experiment", "bench")
                        .setup(&setup)
                        .with("pattern", opts.workload.pattern)
                        .with("qd", qd)
                        .with("seed", opts.workload.seed)
                        .with("failed", join(&a.fail))
                        .metrics(&r.metrics)
                        .with("readback_mismatches", r.readback.map_or(0, |b| b.mismatches))
                        .with(
                            "readback_crc32",
                            r.readback.map_or(String::new(), |b| format!("{:08x}", b.checksum)),
                        ),
                );
            }
        }
        Cmd::Replay { trace, closed_loop } => {
            let records = parse_trace(BufReader::new(File::open(&trace)?))?;
            let setup = Setup::from_run(&cfg)?;
            for qd in common.qds(&cfg) {
                let r = experiments::replay(&setup, &records, qd, closed_loop, cfg.workload.seed)?;
                report_failures(&r.failures);
                ok &= r.passed();
                rows.push(
                    Row::default()
                        .with("experiment", "replay")
                        .setup(&setup)
                        .with("qd", qd)
                        .with("closed_loop", closed_loop)
                        .metrics(&r.metrics),
                );
            }
        }
        Cmd::Crashtest(a) => {
            let setup = Setup::from_run(&cfg)?;
            let points = match (a.points.is_empty(), a.random, a.gc_points) {
                (false, _, _) => CrashPoints::List(a.points.clone()),
                (true, Some(n), _) => CrashPoints::Random {
                    count: n,
                    seed: cfg.workload.seed,
                },
                (true, None, Some(n)) => CrashPoints::MidGc {
                    count: n,
                    seed: cfg.workload.seed,
                },
                (true, None, None) => CrashPoints::All,
            };
            for qd in common.qds(&cfg) {
                let opts = CrashOptions {
                    workload: WorkloadSpec {
                        qd,
                        ..cfg.workload.clone()
                    },
                    writes: a.writes,
                    points: points.clone(),
                };
                for v in experiments::crashtest(&setup, &opts)? {
                    if let Some(e) = v.error.as_ref().filter(|_| !v.passed()) {
                        eprintln!("crash at {}: {e}", v.point);
                    }
                    ok &= v.passed();
                    let r = &v.report;
                    rows.push(
                        Row::default()
                            .with("experiment", "crashtest")
                            .with("scheme", setup.volume.scheme.kind)
                            .with("qd", qd)
                            .with("point", v.point)
                            .with("acked_blocks", v.acked_blocks)
                            .with("bad_blocks", v.bad_blocks)
                            .with("passed", v.passed())
                            .with("segments_recovered", r.segments_recovered)
                            .with("segments_discarded", r.segments_discarded)
                            .with("segments_sealed_by_recovery", r.segments_sealed_by_recovery)
                            .with("segments_resumed", r.segments_resumed)
                            .with("segments_relocated", r.segments_relocated)
                            .with("partial_stripes_discarded", r.partial_stripes_discarded)
                            .with("recovery_us", r.elapsed_ns as f64 / 1000.0),
                    );
                }
            }
        }
        Cmd::Rebuild { fill, fail, payload } => {
            let setup = Setup::from_run(&cfg)?;
            let scheme = setup.volume.scheme;
            let mut sorted = fail.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if !admissible_failures(&scheme).contains(&sorted) {
                return Err(HarnessError::Config(format!(
                    "{} cannot rebuild drives {}",
                    scheme.kind,
                    join(&fail)
                )));
            }
            for qd in common.qds(&cfg) {
                let o = experiments::rebuild(&setup, fill, &sorted, payload, qd, cfg.workload.seed)?;
                ok &= o.passed();
                rows.push(
                    Row::default()
                        .with("experiment", "rebuild")
                        .setup(&setup)
                        .with("fill_bytes", fill)
                        .with("failed", join(&sorted))
                        .with("zones_rebuilt", o.report.zones_rebuilt)
                        .with("blocks_read", o.report.blocks_read)
                        .with("blocks_written", o.report.blocks_written)
                        .with("rebuild_ms", experiments::ns_to_ms(o.report.elapsed_ns))
                        .with("zones_differing", o.zones_differing)
                        .with("bad_blocks", o.bad_blocks),
                );
            }
        }
        Cmd::GcStress {
            overwrite,
            pattern,
            sizes,
        } => {
            let setup = Setup::from_run(&cfg)?;
            cfg.workload.pattern = pattern;
            if let Some(s) = &sizes {
                cfg.workload.sizes = parse_sizes(s)?;
            }
            for qd in common.qds(&cfg) {
                let spec = WorkloadSpec {
                    qd,
                    ..cfg.workload.clone()
                };
                let r = experiments::gc_stress(&setup, overwrite, &spec)?;
                report_failures(&r.failures);
                ok &= r.passed();
                rows.push(
                    Row::default()
                        .with("experiment", "gc-stress")
                        .setup(&setup)
                        .with("pattern", pattern)
                        .with("overwrite", overwrite)
                        .with("qd", qd)
                        .metrics(&r.metrics)
                        .with("readback_mismatches", r.readback.map_or(0, |b| b.mismatches)),
                );
            }
        }
        Cmd::Geometry { chunk_blocks, stripes } => {
            let v = &cfg.volume;
            let chunk = chunk_blocks.unwrap_or(v.chunk_small / BLOCK_SIZE as u32);
            let g = experiments::geometry(
                cfg.device.zone_capacity_blocks,
                chunk,
                v.drives as u64,
                cfg.device.num_zones as u64,
                stripes,
                v.group_size,
            )?;
            let mut out = common.output()?;
            let s = &g.geometry;
            writeln!(out, "zone_capacity_blocks {}", s.zone_capacity)?;
            writeln!(out, "chunk_blocks {}", s.chunk_blocks)?;
            writeln!(out, "header_blocks {}", s.header_blocks)?;
            writeln!(out, "data_blocks {}", s.data_blocks())?;
            writeln!(out, "footer_blocks {}", s.footer_blocks)?;
            writeln!(out, "stripes {}", s.stripes)?;
            writeln!(out, "cst_max_bytes {}", g.cst_max_bytes)?;
            writeln!(out, "cst_max_gib {:.4}", g.cst_max_bytes as f64 / (1u64 << 30) as f64)?;
            return Ok(true);
        }
        Cmd::ConvertTrace {
            input,
            device,
            capacity,
        } => {
            let recs = convert_cloud_trace(BufReader::new(File::open(&input)?), device.as_deref(), capacity)?;
            write_trace(common.output()?, &recs)?;
            return Ok(true);
        }
    }
    experiments::write_rows(common.output()?, &rows)?;
    Ok(ok)
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";")
}

fn report_failures(f: &[String]) {
    for m in f {
        eprintln!("verify: {m}");
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
