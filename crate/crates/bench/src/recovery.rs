//! Work done by a restart before the first request is served, and
//! throughput right after it.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dash_core::hashcore::KeyMode;
use dash_core::persist::{CrashPolicy, PersistentPool, PoolMode};
use dash_core::table::HashIndex;

use crate::workload::{create_table, pool_capacity, restart_table, KeyKind, KeySpace, TableKind};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub table: String,
    pub path: String,
    pub records: u64,
    pub stores: u64,
    pub bytes_stored: u64,
    pub flushes: u64,
    pub fences: u64,
    pub wrapped: bool,
    pub restart_micros: u128,
    pub first_search_hit: bool,
}

impl RecoveryRow {
    /// The persistent-work columns, which should not depend on size.
    pub fn work(&self) -> (u64, u64, u64, u64) {
        (self.stores, self.bytes_stored, self.flushes, self.fences)
    }
}

fn build(kind: TableKind, records: u64, seed: u64) -> dash_core::Result<(Arc<PersistentPool>, Arc<dyn HashIndex>)> {
    let pool = Arc::new(PersistentPool::in_memory(pool_capacity(records, KeyKind::Inline8), PoolMode::CrashSim)?);
    let t = create_table(kind, KeyMode::Inline, 2, pool.clone())?;
    let keys = KeySpace::new(seed, KeyKind::Inline8);
    for i in 0..records {
        t.insert(keys.key(i).as_key(), i)?;
    }
    Ok((pool, t))
}

fn measure(kind: TableKind, path: &str, records: u64, image: PersistentPool, seed: u64) -> dash_core::Result<RecoveryRow> {
    let start = Instant::now();
    let t = restart_table(kind, Arc::new(image))?;
    let restart_micros = start.elapsed().as_micros();
    let rs = t.restart_stats();
    let keys = KeySpace::new(seed, KeyKind::Inline8);
    let first_search_hit = records == 0 || t.search(keys.key(records / 2).as_key())? == Some(records / 2);
    Ok(RecoveryRow {
        table: kind.to_string(),
        path: path.to_string(),
        records,
        stores: rs.work.stores,
        bytes_stored: rs.work.bytes_stored,
        flushes: rs.work.flushes,
        fences: rs.work.fences,
        wrapped: rs.wrapped,
        restart_micros,
        first_search_hit,
    })
}

/// For each size: crash a populated table and restart it, then shut an
/// identical table down cleanly and restart that.
pub fn recovery_probe(kind: TableKind, sizes: &[u64], seed: u64) -> dash_core::Result<Vec<RecoveryRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        let (pool, t) = build(kind, n, seed)?;
        rows.push(measure(kind, "crash", n, pool.crash(CrashPolicy::Strict)?, seed)?);
        t.shutdown()?;
        drop(t);
        rows.push(measure(kind, "clean", n, pool.crash(CrashPolicy::Strict)?, seed)?);
    }
    Ok(rows)
}

/// Whether every row of each path did the same persistent work.
pub fn constant_work(rows: &[RecoveryRow]) -> bool {
    ["crash", "clean"].iter().all(|path| {
        let mut w = rows.iter().filter(|r| r.path == *path).map(RecoveryRow::work);
        w.next().is_none_or(|first| w.all(|x| x == first))
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimelineRow {
    pub window: u32,
    pub ops: u64,
    pub seconds: f64,
    pub mops: f64,
    pub segment_recoveries: u64,
}

/// Search throughput in consecutive windows right after a crash restart.
pub fn post_restart_timeline(
    kind: TableKind,
    records: u64,
    windows: u32,
    window_ops: u64,
    seed: u64,
) -> dash_core::Result<Vec<TimelineRow>> {
    let (pool, _) = build(kind, records, seed)?;
    let t = restart_table(kind, Arc::new(pool.crash(CrashPolicy::Strict)?))?;
    let keys = KeySpace::new(seed, KeyKind::Inline8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for w in 0..windows {
        let m0 = t.metrics();
        let start = Instant::now();
        for _ in 0..window_ops {
            t.search(keys.key(rng.gen_range(0..records)).as_key())?;
        }
        let secs = start.elapsed().as_secs_f64();
        rows.push(TimelineRow {
            window: w,
            ops: window_ops,
            seconds: secs,
            mops: window_ops as f64 / secs.max(1e-9) / 1e6,
            segment_recoveries: t.metrics().since(&m0).segment_recoveries,
        });
    }
    Ok(rows)
}
