//! Load-factor measurements: single segments under each insertion
//! technique, and whole tables over a stream of inserts.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dash_core::hashcore::{hash_u64, Key, KeyMode, BUCKET_SIZE};
use dash_core::metrics::TableMetrics;
use dash_core::persist::pool::HDR_ROOT;
use dash_core::persist::{PersistentPool, PoolMode, MIN_CAPACITY};
use dash_core::segment::{Geometry, InsertPolicy, InsertStep, Segment};

use crate::workload::{create_table, pool_capacity, KeyKind, KeySpace, TableKind};

/// Insertion techniques, cumulative, with the stash size each uses.
pub const TECHNIQUES: [(&str, InsertPolicy, usize); 4] = [
    ("bucketized", InsertPolicy::BUCKETIZED, 0),
    ("+probing", InsertPolicy::PROBING, 0),
    ("+balanced", InsertPolicy::BALANCED, 0),
    ("+stash", InsertPolicy::STASH, 2),
];

/// Normal-bucket counts for 1, 4, 16, 64 and 128 KiB segments.
pub const SEGMENT_BUCKETS: [usize; 5] = [4, 16, 64, 256, 512];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub technique: String,
    pub segment_kib: u64,
    pub buckets: usize,
    pub stash: usize,
    pub trials: u32,
    pub mean_peak_load_factor: f64,
    pub min_peak_load_factor: f64,
}

/// Inserts random keys into one empty segment until the first insert fails
/// and returns the load factor reached.
pub fn fill_segment(buckets: usize, stash: usize, policy: InsertPolicy, seed: u64) -> f64 {
    let geo = Geometry { k: buckets, s: stash, mode: KeyMode::Inline };
    let cap = (geo.segment_bytes() + 8 * MIN_CAPACITY).div_ceil(MIN_CAPACITY) * MIN_CAPACITY;
    let pool = PersistentPool::in_memory(cap, PoolMode::Direct).expect("pool");
    let base = pool.alloc_into(geo.segment_bytes(), HDR_ROOT, false, |_| Ok(())).expect("segment");
    let seg = Segment::new(&pool, base, geo);
    let metrics = TableMetrics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0u64;
    loop {
        let k: u64 = rng.gen();
        let mut kw = None;
        match seg.insert(hash_u64(k), &Key::Int(k), k, &mut kw, policy, &|| true, &metrics) {
            Ok(InsertStep::Inserted { .. }) => n += 1,
            Ok(InsertStep::Exists) => {}
            Ok(InsertStep::Full) => break,
            Ok(InsertStep::Retry) | Err(_) => unreachable!("single-threaded segment fill cannot retry or fail"),
        }
    }
    n as f64 / geo.slots() as f64
}

pub fn load_factor_sweep(segment_buckets: &[usize], trials: u32, seed: u64) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &buckets in segment_buckets {
        for (name, policy, stash) in TECHNIQUES {
            let peaks: Vec<f64> =
                (0..trials).map(|t| fill_segment(buckets, stash, policy, seed ^ (t as u64) << 32)).collect();
            rows.push(SweepRow {
                technique: name.to_string(),
                segment_kib: buckets as u64 * BUCKET_SIZE / 1024,
                buckets,
                stash,
                trials,
                mean_peak_load_factor: peaks.iter().sum::<f64>() / trials as f64,
                min_peak_load_factor: peaks.iter().copied().fold(f64::INFINITY, f64::min),
            });
        }
    }
    rows
}

/// Whether, for every segment size, mean peaks strictly increase along
/// [`TECHNIQUES`]. Two techniques that both fill the segment completely
/// tie at the ceiling and are not a violation. Returns the violations.
pub fn ordering_violations(rows: &[SweepRow]) -> Vec<String> {
    let mut out = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (w[0].mean_peak_load_factor, w[1].mean_peak_load_factor);
        if w[0].buckets == w[1].buckets && a >= b && !(a == 1.0 && b == 1.0) {
            out.push(format!(
                "{} KiB: {} ({:.3}) >= {} ({:.3})",
                w[0].segment_kib, w[0].technique, w[0].mean_peak_load_factor, w[1].technique, w[1].mean_peak_load_factor
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct TablePeak {
    pub table: String,
    pub stash: usize,
    pub records: u64,
    /// Highest load factor seen once the table holds a tenth of the records.
    pub peak_load_factor: f64,
    pub final_load_factor: f64,
    pub segments: u64,
}

/// Inserts `records` keys into an empty table, tracking the load factor
/// after every insert.
pub fn table_peak(kind: TableKind, stash: usize, records: u64, seed: u64) -> dash_core::Result<TablePeak> {
    let pool = Arc::new(PersistentPool::in_memory(pool_capacity(records, KeyKind::Inline8), PoolMode::Direct)?);
    let t = create_table(kind, KeyMode::Inline, stash, pool)?;
    let keys = KeySpace::new(seed, KeyKind::Inline8);
    let mut peak = 0f64;
    for i in 0..records {
        t.insert(keys.key(i).as_key(), i)?;
        if i >= records / 10 {
            peak = peak.max(t.load_factor());
        }
    }
    Ok(TablePeak {
        table: kind.to_string(),
        stash,
        records,
        peak_load_factor: peak,
        final_load_factor: t.load_factor(),
        segments: t.segment_count(),
    })
}
