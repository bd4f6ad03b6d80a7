//! Report rows and CSV/stdout emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// One measured phase, or one operation class within a phase. Persistence
/// counters are per class only when the phase ran on a single thread.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseRow {
    pub table: String,
    pub phase: String,
    pub class: String,
    pub mix: String,
    pub key_kind: String,
    pub threads: usize,
    pub ops: u64,
    pub hits: u64,
    pub seconds: f64,
    pub mops: f64,
    pub load_factor: f64,
    pub segments: u64,
    pub key_compares_per_search: f64,
    pub key_loads_per_search: f64,
    pub stash_probes_per_search: f64,
    pub search_retries: u64,
    pub splits: u64,
    pub displacements: u64,
    pub stash_inserts: u64,
    pub stores: Option<u64>,
    pub flushes: Option<u64>,
    pub fences: Option<u64>,
    pub stores_per_op: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub phase: String,
    pub ops: u64,
    pub load_factor: f64,
    pub segments: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityEvent {
    pub phase: String,
    pub ops: u64,
    pub segments: u64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub rows: Vec<PhaseRow>,
    pub timeline: Vec<TimelinePoint>,
    pub capacity_events: Vec<CapacityEvent>,
    pub peak_load_factor: f64,
}

impl MetricsReport {
    pub fn print(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "{:<4} {:<11} {:<7} {:>9} {:>9} {:>8} {:>6} {:>6} {:>7} {:>7} {:>9} {:>9} {:>9}",
            "tbl", "phase", "class", "ops", "hits", "mops", "lf", "cmp/s", "load/s", "stash/s", "stores", "flushes", "fences"
        )?;
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        for r in &self.rows {
            writeln!(
                out,
                "{:<4} {:<11} {:<7} {:>9} {:>9} {:>8.3} {:>6.3} {:>6.3} {:>7.3} {:>7.3} {:>9} {:>9} {:>9}",
                r.table,
                r.phase,
                r.class,
                r.ops,
                r.hits,
                r.mops,
                r.load_factor,
                r.key_compares_per_search,
                r.key_loads_per_search,
                r.stash_probes_per_search,
                opt(r.stores),
                opt(r.flushes),
                opt(r.fences)
            )?;
        }
        writeln!(out, "peak load factor {:.4}", self.peak_load_factor)?;
        for e in &self.capacity_events {
            writeln!(out, "capacity {} ops {} segments {}", e.phase, e.ops, e.segments)?;
        }
        Ok(())
    }

    /// Writes phase rows to `path` and the load-factor timeline next to it.
    pub fn write_csv(&self, path: &Path) -> csv::Result<()> {
        write_csv(path, &self.rows)?;
        if !self.timeline.is_empty() {
            write_csv(&sibling(path, "timeline"), &self.timeline)?;
        }
        Ok(())
    }
}

/// `dir/name.csv` -> `dir/name_<suffix>.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
