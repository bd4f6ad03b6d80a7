use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dash_bench::crash::{self, PolicyKind, Scenario};
use dash_bench::recovery::{self, constant_work};
use dash_bench::report::write_csv;
use dash_bench::sweep::{self, ordering_violations, SEGMENT_BUCKETS};
use dash_bench::workload::{self, Distribution, KeyKind, Mix, TableKind, WorkloadSpec};

#[derive(Parser)]
#[command(name = "bench", about = "Benchmarks and crash checks for the persistent hash tables")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Preload, then run one operation mix and report per-phase metrics.
    Run {
        #[arg(long, value_enum, default_value_t = TableKind::Eh)]
        table: TableKind,
        #[arg(long, default_value_t = 100_000)]
        preload: u64,
        #[arg(long, default_value_t = 1_000_000)]
        ops: u64,
        /// insert, pos-search, neg-search, delete or mixed:<insert%>
        #[arg(long, default_value = "insert")]
        mix: Mix,
        /// inline8 or var:<bytes>
        #[arg(long, default_value = "inline8")]
        key: KeyKind,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "uniform")]
        distribution: Distribution,
        #[arg(long, default_value_t = 2)]
        stash: usize,
        /// Back the table with this file.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Single-segment load-factor sweep plus whole-table peaks.
    Sweep {
        #[arg(long, default_value_t = 5)]
        trials: u32,
        #[arg(long, default_value_t = 200_000)]
        records: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Enumerate crash points for structural scenarios.
    Crash {
        /// Defaults to every scenario.
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
        /// Check at most this many points per scenario.
        #[arg(long)]
        points: Option<u64>,
        #[arg(long)]
        adversarial: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Restart work for crashed and cleanly shut down tables.
    Recovery {
        #[arg(long, value_enum)]
        table: Option<TableKind>,
        #[arg(long, value_delimiter = ',', default_values_t = [10_000u64, 100_000, 1_000_000])]
        sizes: Vec<u64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn emit<T: serde::Serialize + std::fmt::Debug>(rows: &[T], csv: Option<&PathBuf>) -> Result<(), String> {
    for r in rows {
        println!("{r:?}");
    }
    if let Some(p) = csv {
        write_csv(p, rows).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn execute(cmd: Cmd) -> Result<bool, String> {
    match cmd {
        Cmd::Run { table, preload, ops, mix, key, threads, seed, distribution, stash, pool, csv } => {
            let spec = WorkloadSpec {
                table,
                preload,
                ops,
                mix,
                key_kind: key,
                threads,
                seed,
                distribution,
                stash,
                pool,
                ..Default::default()
            };
            let report = workload::run(&spec)?;
            report.print(&mut io::stdout()).map_err(|e| e.to_string())?;
            if let Some(p) = csv {
                report.write_csv(&p).map_err(|e| e.to_string())?;
            }
            Ok(true)
        }
        Cmd::Sweep { trials, records, seed, csv } => {
            let rows = sweep::load_factor_sweep(&SEGMENT_BUCKETS, trials, seed);
            emit(&rows, csv.as_ref())?;
            let mut peaks = Vec::new();
            for (kind, stash) in [(TableKind::Eh, 0), (TableKind::Eh, 2), (TableKind::Eh, 4), (TableKind::Lh, 2)] {
                peaks.push(sweep::table_peak(kind, stash, records, seed).map_err(|e| e.to_string())?);
            }
            emit(&peaks, csv.map(|p| dash_bench::report::sibling(&p, "tables")).as_ref())?;
            let bad = ordering_violations(&rows);
            for v in &bad {
                eprintln!("ordering violation: {v}");
            }
            Ok(bad.is_empty())
        }
        Cmd::Crash { scenario, points, adversarial, seed, csv } => {
            let policy = if adversarial { PolicyKind::Adversarial } else { PolicyKind::Strict };
            let scenarios = scenario.map_or(Scenario::ALL.to_vec(), |s| vec![s]);
            let mut reports = Vec::new();
            for s in scenarios {
                reports.push(crash::crash_sweep(s, seed, points, policy)?);
            }
            emit(&reports, csv.as_ref())?;
            for r in &reports {
                for f in &r.failure_list {
                    eprintln!("{}: {f}", r.scenario);
                }
            }
            Ok(reports.iter().all(|r| r.passed()))
        }
        Cmd::Recovery { table, sizes, seed, csv } => {
            let kinds = table.map_or(vec![TableKind::Eh, TableKind::Lh], |t| vec![t]);
            let mut rows = Vec::new();
            let mut ok = true;
            for k in kinds {
                let r = recovery::recovery_probe(k, &sizes, seed).map_err(|e| e.to_string())?;
                ok &= constant_work(&r);
                rows.extend(r);
            }
            emit(&rows, csv.as_ref())?;
            Ok(ok && rows.iter().all(|r| r.first_search_hit))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
