use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dpmkv::StoreKind;
use dpmkv_harness::micro::{rtt_table, RttRow};
use dpmkv_harness::scan::{cache_scan, lb_demo, scalability_scan, Axis, CachePoint, LbScenario};
use dpmkv_harness::{crash_sweep, isolation_stress, run_bench, Mix, StoreOpts, SweepVerdict, WorkloadSpec};

#[derive(Parser)]
#[command(name = "dpmkv", about = "Simulated DPM key-value store experiments", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One benchmark run.
    Bench(Common),
    /// Uncontended round trips per operation for every store.
    Micro(Common),
    /// Crash-point sweep over a single put.
    Crash(Common),
    /// Read-committed stress run.
    Isolate(Common),
    /// Throughput over a range of CN or DPM counts.
    Scale {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cns")]
        axis: Axis,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        points: Vec<u16>,
        /// Seeds per point; the seed flag gives the first.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Per-DPM traffic in the A/B/C scenario with load balancing off and on.
    Lb(Common),
    /// Sep throughput and hit rate over metadata cache sizes.
    Cache {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,10,50,100")]
        pcts: Vec<u32>,
    },
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value = "sep")]
    store: StoreKind,
    #[arg(long, default_value_t = 4)]
    cns: u16,
    #[arg(long, default_value_t = 4)]
    dpms: u16,
    #[arg(long, default_value_t = 8)]
    threads: u16,
    #[arg(long, default_value = "B")]
    workload: Mix,
    #[arg(long, default_value_t = 100_000)]
    keys: u64,
    #[arg(long, default_value_t = 1024)]
    value_size: u64,
    #[arg(long, default_value_t = 0.99)]
    zipf: f64,
    /// Measured operations over all tasks.
    #[arg(long, default_value_t = 200_000)]
    ops: u64,
    #[arg(long, default_value_t = 1)]
    replication: usize,
    /// Defaults to 100 for sep and 0 otherwise.
    #[arg(long)]
    cache_pct: Option<u32>,
    /// Coordinator or metadata server handlers.
    #[arg(long, default_value_t = 8)]
    handlers: u32,
    #[arg(long)]
    no_load_balance: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn opts(&self) -> StoreOpts {
        let mut o = StoreOpts::new(self.store);
        o.replication = self.replication;
        if let Some(p) = self.cache_pct {
            o.cache_pct = p;
        }
        o.handlers = self.handlers;
        o.load_balance = !self.no_load_balance;
        o
    }

    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            keys: self.keys,
            value_size: self.value_size,
            theta: self.zipf,
            mix: self.workload,
            ops: self.ops,
            warmup: self.ops / 10,
            cns: self.cns,
            threads: self.threads,
            dpms: self.dpms,
            seed: self.seed,
            ..Default::default()
        }
    }

    fn sink(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(File::create(p)?),
            None => Box::new(io::stdout().lock()),
        })
    }
}

fn write_rows<H: AsRef<[u8]>>(
    out: Box<dyn Write>,
    header: &[H],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the command; `Ok(false)` means a verdict failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Bench(c) => {
            let r = run_bench(c.opts(), &c.spec())?;
            dpmkv_harness::bench::write_csv(c.sink()?, std::slice::from_ref(&r))?;
            Ok(r.passed())
        }
        Cmd::Micro(c) => {
            let rows = rtt_table(c.value_size)?;
            write_rows(c.sink()?, &RttRow::CSV_HEADER, rows.iter().map(RttRow::csv_row))?;
            Ok(true)
        }
        Cmd::Crash(c) => {
            let v = crash_sweep(&c.opts())?;
            eprintln!("{v}");
            write_rows(c.sink()?, &SweepVerdict::CSV_HEADER, v.csv_rows())?;
            Ok(v.passed())
        }
        Cmd::Isolate(c) => {
            let v = isolation_stress(c.opts(), &c.spec())?;
            for line in &v.report.violations {
                eprintln!("{line}");
            }
            dpmkv_harness::bench::write_csv(c.sink()?, std::slice::from_ref(&v.report))?;
            Ok(v.passed())
        }
        Cmd::Scale {
            common: c,
            axis,
            points,
            seeds,
        } => {
            let seeds: Vec<u64> = (c.seed..c.seed + seeds).collect();
            let curve = scalability_scan(c.opts(), &c.spec(), axis, &points, &seeds)?;
            let reports: Vec<_> = curve.iter().flat_map(|p| p.reports.iter().cloned()).collect();
            for p in &curve {
                eprintln!("{:?}={} median throughput {:.4}", axis, p.x, p.median());
            }
            dpmkv_harness::bench::write_csv(c.sink()?, &reports)?;
            Ok(reports.iter().all(|r| r.passed()))
        }
        Cmd::Lb(c) => {
            let scenario = LbScenario {
                threads: c.threads,
                value_size: c.value_size,
                seed: c.seed,
                ..Default::default()
            };
            let rows = [false, true]
                .into_iter()
                .map(|lb| {
                    let r = lb_demo(scenario, lb)?;
                    let mut row = vec![lb.to_string(), format!("{:.3}", r.ratio())];
                    row.extend(r.device_bytes.iter().map(u64::to_string));
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()?;
            write_rows(
                c.sink()?,
                &[
                    "load_balance",
                    "max_min_ratio",
                    "dpm0_bytes",
                    "dpm1_bytes",
                    "dpm2_bytes",
                ],
                rows,
            )?;
            Ok(true)
        }
        Cmd::Cache { common: c, pcts } => {
            let mut opts = c.opts();
            opts.kind = StoreKind::Sep;
            let curve = cache_scan(opts, &c.spec(), &pcts)?;
            write_rows(
                c.sink()?,
                &CachePoint::CSV_HEADER,
                curve.iter().map(CachePoint::csv_row),
            )?;
            Ok(curve.iter().all(|p| p.report.passed()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
