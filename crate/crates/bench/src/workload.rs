//! Workload specification, key streams and the phase runner.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dash_core::eh::{DashEh, EhConfig};
use dash_core::hashcore::{KeyMode, OwnedKey};
use dash_core::lh::{DashLh, LhConfig};
use dash_core::persist::{PersistStats, PersistentPool, PoolMode, MIN_CAPACITY};
use dash_core::table::{HashIndex, InsertOutcome};

use crate::report::{CapacityEvent, MetricsReport, PhaseRow, TimelinePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Eh,
    Lh,
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            TableKind::Eh => "eh",
            TableKind::Lh => "lh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Inline8,
    Variable(usize),
}

impl KeyKind {
    pub fn mode(self) -> KeyMode {
        match self {
            KeyKind::Inline8 => KeyMode::Inline,
            KeyKind::Variable(_) => KeyMode::Variable,
        }
    }
}

impl FromStr for KeyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inline8" => Ok(KeyKind::Inline8),
            _ => match s.strip_prefix("var:").map(str::parse::<usize>) {
                Some(Ok(len)) if len >= 8 => Ok(KeyKind::Variable(len)),
                _ => Err(format!("unknown key kind '{s}' (expected inline8 or var:LEN with LEN >= 8)")),
            },
        }
    }
}

impl fmt::Display for KeyKind {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            KeyKind::Inline8 => f.write_str("inline8"),
            KeyKind::Variable(n) => write!(f, "var:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mix {
    Insert,
    PosSearch,
    NegSearch,
    Delete,
    /// Percentage of inserts; the rest are positive searches.
    Mixed(u8),
}

impl FromStr for Mix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "insert" => Ok(Mix::Insert),
            "pos-search" => Ok(Mix::PosSearch),
            "neg-search" => Ok(Mix::NegSearch),
            "delete" => Ok(Mix::Delete),
            _ => match s.strip_prefix("mixed:").map(str::parse::<u8>) {
                Some(Ok(p)) if p <= 100 => Ok(Mix::Mixed(p)),
                _ => Err(format!(
                    "unknown mix '{s}' (expected insert, pos-search, neg-search, delete or mixed:PCT)"
                )),
            },
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self {
            Mix::Insert => f.write_str("insert"),
            Mix::PosSearch => f.write_str("pos-search"),
            Mix::NegSearch => f.write_str("neg-search"),
            Mix::Delete => f.write_str("delete"),
            Mix::Mixed(p) => write!(f, "mixed:{p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
}

impl FromStr for Distribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "zipfian" => Err("zipfian key distribution is not implemented".into()),
            _ => Err(format!("unknown distribution '{s}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub table: TableKind,
    pub preload: u64,
    pub ops: u64,
    pub mix: Mix,
    pub key_kind: KeyKind,
    pub threads: usize,
    pub seed: u64,
    pub distribution: Distribution,
    pub stash: usize,
    /// Back the table with this file instead of memory.
    pub pool: Option<PathBuf>,
    /// Record a load-factor sample every this many inserts.
    pub sample_every: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            table: TableKind::Eh,
            preload: 100_000,
            ops: 1_000_000,
            mix: Mix::Insert,
            key_kind: KeyKind::Inline8,
            threads: 1,
            seed: 42,
            distribution: Distribution::Uniform,
            stash: 2,
            pool: None,
            sample_every: 1000,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.threads == 0 {
            return Err("at least one thread is required".into());
        }
        if matches!(self.mix, Mix::PosSearch | Mix::Delete | Mix::Mixed(_)) && self.preload == 0 && self.ops > 0 {
            return Err(format!("mix {} needs a preload", self.mix));
        }
        Ok(())
    }
}

/// Deterministic key stream. Index `i` always names the same key; indices
/// below 2^62 are "positive" keys, negative keys come from a disjoint range.
#[derive(Debug, Clone, Copy)]
pub struct KeySpace {
    seed: u64,
    kind: KeyKind,
}

const NEGATIVE_BASE: u64 = 1 << 63;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl KeySpace {
    pub fn new(seed: u64, kind: KeyKind) -> Self {
        KeySpace { seed, kind }
    }

    fn word(&self, i: u64) -> u64 {
        // A bijection of `i`, so distinct indices give distinct keys.
        mix64(i.wrapping_add(self.seed.wrapping_mul(0x9e3779b97f4a7c15)))
    }

    pub fn key(&self, i: u64) -> OwnedKey {
        let w = self.word(i);
        match self.kind {
            KeyKind::Inline8 => OwnedKey::Int(w),
            KeyKind::Variable(len) => {
                let mut b = w.to_le_bytes().to_vec();
                let mut f = w;
                while b.len() < len {
                    f = mix64(f);
                    b.extend_from_slice(&f.to_le_bytes()[..(len - b.len()).min(8)]);
                }
                OwnedKey::Bytes(b)
            }
        }
    }

    pub fn negative(&self, i: u64) -> OwnedKey {
        self.key(NEGATIVE_BASE | (i >> 1))
    }
}

pub fn pool_capacity(records: u64, kind: KeyKind) -> u64 {
    let per = match kind {
        KeyKind::Inline8 => 160,
        KeyKind::Variable(len) => 300 + len as u64,
    };
    let bytes = (records * per).max(16 * MIN_CAPACITY);
    bytes.div_ceil(MIN_CAPACITY) * MIN_CAPACITY
}

pub fn create_table(kind: TableKind, mode: KeyMode, stash: usize, pool: Arc<PersistentPool>) -> dash_core::Result<Arc<dyn HashIndex>> {
    Ok(match kind {
        TableKind::Eh => Arc::new(DashEh::create(pool, EhConfig { stash, key_mode: mode, ..Default::default() })?),
        TableKind::Lh => Arc::new(DashLh::create(pool, LhConfig { stash, key_mode: mode, ..Default::default() })?),
    })
}

pub fn restart_table(kind: TableKind, pool: Arc<PersistentPool>) -> dash_core::Result<Arc<dyn HashIndex>> {
    Ok(match kind {
        TableKind::Eh => Arc::new(DashEh::restart(pool)?),
        TableKind::Lh => Arc::new(DashLh::restart(pool)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpClass {
    Insert,
    Search,
    Delete,
}

impl OpClass {
    fn name(self) -> &'static str {
        match self {
            OpClass::Insert => "insert",
            OpClass::Search => "search",
            OpClass::Delete => "delete",
        }
    }
}

#[derive(Default, Clone, Copy)]
struct ClassTally {
    ops: u64,
    hits: u64,
    persist: PersistStats,
}

impl ClassTally {
    fn add(&mut self, o: &ClassTally) {
        self.ops += o.ops;
        self.hits += o.hits;
        self.persist = add_stats(&self.persist, &o.persist);
    }
}

fn add_stats(a: &PersistStats, b: &PersistStats) -> PersistStats {
    PersistStats {
        stores: a.stores + b.stores,
        bytes_stored: a.bytes_stored + b.bytes_stored,
        flushes: a.flushes + b.flushes,
        flushed_lines: a.flushed_lines + b.flushed_lines,
        fences: a.fences + b.fences,
    }
}

#[derive(Default)]
struct WorkerOut {
    tallies: [ClassTally; 3],
    timeline: Vec<TimelinePoint>,
}

struct Phase<'a> {
    name: &'a str,
    spec: &'a WorkloadSpec,
    table: &'a Arc<dyn HashIndex>,
    keys: KeySpace,
    mix: Mix,
    ops: u64,
    /// First key index handed out to inserts of this phase.
    insert_base: u64,
}

impl Phase<'_> {
    fn worker(&self, tid: usize, out: &mut WorkerOut) -> dash_core::Result<()> {
        let threads = self.spec.threads as u64;
        let share = self.ops / threads + u64::from((tid as u64) < self.ops % threads);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ mix64(tid as u64 + 1) ^ mix64(self.insert_base));
        let exact = self.spec.threads == 1;
        let pool = self.table.pool();
        let mut inserted = 0u64;
        for j in 0..share {
            let class = match self.mix {
                Mix::Insert => OpClass::Insert,
                Mix::PosSearch | Mix::NegSearch => OpClass::Search,
                Mix::Delete => OpClass::Delete,
                Mix::Mixed(p) => {
                    if rng.gen_range(0..100) < p as u32 {
                        OpClass::Insert
                    } else {
                        OpClass::Search
                    }
                }
            };
            let before = exact.then(|| pool.stats());
            let hit = match class {
                OpClass::Insert => {
                    let k = self.keys.key(self.insert_base + tid as u64 + inserted * threads);
                    inserted += 1;
                    self.table.insert(k.as_key(), j)? == InsertOutcome::Inserted
                }
                OpClass::Search => {
                    let k = match self.mix {
                        Mix::NegSearch => self.keys.negative(rng.gen()),
                        _ => self.keys.key(rng.gen_range(0..self.spec.preload)),
                    };
                    self.table.search(k.as_key())?.is_some()
                }
                OpClass::Delete => {
                    let k = self.keys.key((tid as u64 + j * threads) % self.spec.preload);
                    self.table.remove(k.as_key())?
                }
            };
            let t = &mut out.tallies[class as usize];
            t.ops += 1;
            t.hits += hit as u64;
            if let Some(b) = before {
                t.persist = add_stats(&t.persist, &pool.stats().since(&b));
            }
            if tid == 0 && class == OpClass::Insert && inserted.is_multiple_of(self.spec.sample_every) {
                out.timeline.push(TimelinePoint {
                    phase: self.name.to_string(),
                    ops: j + 1,
                    load_factor: self.table.load_factor(),
                    segments: self.table.segment_count(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, report: &mut MetricsReport) -> dash_core::Result<()> {
        let table = self.table;
        let m0 = table.metrics();
        let p0 = table.pool().stats();
        let start = Instant::now();
        let outs: Vec<dash_core::Result<WorkerOut>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.spec.threads)
                .map(|tid| {
                    s.spawn(move || {
                        let mut out = WorkerOut::default();
                        self.worker(tid, &mut out).map(|_| out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let secs = start.elapsed().as_secs_f64();
        let mut total = [ClassTally::default(); 3];
        for out in outs {
            let out = out?;
            for (t, o) in total.iter_mut().zip(&out.tallies) {
                t.add(o);
            }
            for p in out.timeline {
                report.note_sample(p);
            }
        }
        let m = table.metrics().since(&m0);
        let persist = table.pool().stats().since(&p0);
        let searches = m.searches.max(1) as f64;
        let row = |class: &str, ops: u64, hits: u64, persist: Option<PersistStats>| PhaseRow {
            table: self.spec.table.to_string(),
            phase: self.name.to_string(),
            class: class.to_string(),
            mix: self.mix.to_string(),
            key_kind: self.spec.key_kind.to_string(),
            threads: self.spec.threads,
            ops,
            hits,
            seconds: secs,
            mops: ops as f64 / secs.max(1e-9) / 1e6,
            load_factor: table.load_factor(),
            segments: table.segment_count(),
            key_compares_per_search: m.search_key_compares as f64 / searches,
            key_loads_per_search: m.search_key_loads as f64 / searches,
            stash_probes_per_search: m.search_stash_probes as f64 / searches,
            search_retries: m.search_retries,
            splits: m.splits,
            displacements: m.displacements,
            stash_inserts: m.stash_inserts,
            stores: persist.map(|p| p.stores),
            flushes: persist.map(|p| p.flushes),
            fences: persist.map(|p| p.fences),
            stores_per_op: persist.map(|p| p.stores as f64 / ops.max(1) as f64),
        };
        let ops: u64 = total.iter().map(|t| t.ops).sum();
        let hits: u64 = total.iter().map(|t| t.hits).sum();
        report.rows.push(row("all", ops, hits, Some(persist)));
        let classes = [OpClass::Insert, OpClass::Search, OpClass::Delete];
        if total.iter().filter(|t| t.ops > 0).count() > 1 {
            for c in classes {
                let t = &total[c as usize];
                if t.ops > 0 {
                    let exact = (self.spec.threads == 1).then_some(t.persist);
                    report.rows.push(row(c.name(), t.ops, t.hits, exact));
                }
            }
        }
        Ok(())
    }
}

/// Builds a table, preloads it and runs the measured phase.
pub fn run(spec: &WorkloadSpec) -> Result<MetricsReport, String> {
    spec.validate()?;
    let err = |e: dash_core::Error| e.to_string();
    let inserts = spec.preload
        + match spec.mix {
            Mix::Insert => spec.ops,
            Mix::Mixed(p) => spec.ops * p as u64 / 100 + spec.threads as u64,
            _ => 0,
        };
    let cap = pool_capacity(inserts, spec.key_kind);
    let pool = match &spec.pool {
        Some(path) => PersistentPool::create(path, cap, PoolMode::Direct),
        None => PersistentPool::in_memory(cap, PoolMode::Direct),
    }
    .map_err(err)?;
    let table = create_table(spec.table, spec.key_kind.mode(), spec.stash, Arc::new(pool)).map_err(err)?;
    let keys = KeySpace::new(spec.seed, spec.key_kind);
    let mut report = MetricsReport::default();
    let preload = WorkloadSpec { threads: spec.threads, ..spec.clone() };
    if spec.preload > 0 {
        Phase { name: "preload", spec: &preload, table: &table, keys, mix: Mix::Insert, ops: spec.preload, insert_base: 0 }
            .run(&mut report)
            .map_err(err)?;
    }
    table.drain_retired();
    if spec.ops > 0 {
        let name = spec.mix.to_string();
        Phase { name: &name, spec, table: &table, keys, mix: spec.mix, ops: spec.ops, insert_base: spec.preload }
            .run(&mut report)
            .map_err(err)?;
    }
    if spec.pool.is_some() {
        table.shutdown().map_err(err)?;
    }
    Ok(report)
}

impl MetricsReport {
    fn note_sample(&mut self, p: TimelinePoint) {
        self.peak_load_factor = self.peak_load_factor.max(p.load_factor);
        if self.capacity_events.last().is_none_or(|e| e.segments < p.segments) {
            self.capacity_events.push(CapacityEvent { phase: p.phase.clone(), ops: p.ops, segments: p.segments });
        }
        self.timeline.push(p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trips() {
        for s in ["insert", "pos-search", "neg-search", "delete", "mixed:20"] {
            assert_eq!(s.parse::<Mix>().unwrap().to_string(), s);
        }
        for s in ["inline8", "var:16"] {
            assert_eq!(s.parse::<KeyKind>().unwrap().to_string(), s);
        }
        assert!("mixed:101".parse::<Mix>().is_err());
        assert!("var:4".parse::<KeyKind>().is_err());
        assert!("zipfian".parse::<Distribution>().is_err());
    }

    #[test]
    fn key_streams_are_disjoint_and_deterministic() {
        let ks = KeySpace::new(7, KeyKind::Variable(24));
        let a: Vec<_> = (0..1000).map(|i| ks.key(i)).collect();
        let b: Vec<_> = (0..1000).map(|i| ks.key(i)).collect();
        assert_eq!(a, b);
        let set: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), 1000);
        assert!((0..1000u64).all(|i| !set.contains(&ks.negative(i * 0x1234_5678_9abc))));
        assert!(a.iter().all(|k| matches!(k, OwnedKey::Bytes(b) if b.len() == 24)));
    }

    #[test]
    fn single_thread_reports_are_reproducible() {
        let spec = WorkloadSpec { preload: 2000, ops: 3000, mix: Mix::Mixed(20), ..Default::default() };
        let a = run(&spec).unwrap();
        let b = run(&spec).unwrap();
        let strip = |r: &MetricsReport| {
            r.rows.iter().map(|r| (r.class.clone(), r.ops, r.hits, r.stores, r.flushes, r.fences)).collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.timeline, b.timeline);
        let classes: Vec<_> = a.rows.iter().map(|r| (r.phase.as_str(), r.class.as_str())).collect();
        assert!(classes.contains(&("mixed:20", "insert")) && classes.contains(&("mixed:20", "search")));
    }

    #[test]
    fn search_phase_stores_nothing() {
        let spec = WorkloadSpec { preload: 20_000, ops: 20_000, mix: Mix::PosSearch, ..Default::default() };
        let r = run(&spec).unwrap();
        let row = r.rows.iter().find(|r| r.phase == "pos-search").unwrap();
        assert_eq!(row.hits, 20_000);
        assert_eq!((row.stores, row.flushes, row.fences), (Some(0), Some(0), Some(0)));
    }

    #[test]
    fn lh_insert_capacity_grows_monotonically() {
        let spec = WorkloadSpec { table: TableKind::Lh, preload: 0, ops: 60_000, sample_every: 500, ..Default::default() };
        let r = run(&spec).unwrap();
        assert!(r.capacity_events.len() > 1);
        assert!(r.capacity_events.windows(2).all(|w| w[0].segments < w[1].segments));
    }
}
