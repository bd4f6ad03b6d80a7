//! Crash-point enumeration against a reference model.
//!
//! A clean base image is forked once per crash point. The fork restarts,
//! arms a crash before its `i`-th persistence op and replays the operation
//! sequence. Operations finished before the freeze are acknowledged and must
//! survive exactly once; the operation running at the freeze may or may not
//! take effect, but atomically.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dash_core::eh::{DashEh, EhConfig};
use dash_core::hashcore::{KeyMode, OwnedKey};
use dash_core::lh::{DashLh, LhConfig};
use dash_core::metrics::MetricsSnapshot;
use dash_core::persist::{CrashPolicy, PersistentPool, PoolMode, MIN_CAPACITY};
use dash_core::table::{HashIndex, InsertOutcome};

use crate::workload::{restart_table, KeyKind, KeySpace, TableKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// One insert that lands in a bucket with room.
    BucketInsert,
    /// One insert that displaces a record to its alternative bucket.
    Displacement,
    /// One extendible-hashing segment split without directory growth.
    SegmentSplit,
    /// One extendible-hashing split that doubles the directory.
    DirectoryDoubling,
    /// One linear-hashing segment split.
    LhSplit,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::BucketInsert,
        Scenario::Displacement,
        Scenario::SegmentSplit,
        Scenario::DirectoryDoubling,
        Scenario::LhSplit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::BucketInsert => "bucket-insert",
            Scenario::Displacement => "displacement",
            Scenario::SegmentSplit => "segment-split",
            Scenario::DirectoryDoubling => "directory-doubling",
            Scenario::LhSplit => "lh-split",
        }
    }

    pub fn table(self) -> TableKind {
        match self {
            Scenario::LhSplit => TableKind::Lh,
            _ => TableKind::Eh,
        }
    }

    fn matches(self, d: &MetricsSnapshot) -> bool {
        let plain = d.splits == 0 && d.chain_allocs == 0 && d.next_advances == 0;
        match self {
            Scenario::BucketInsert => plain && d.displacements == 0 && d.stash_inserts == 0,
            Scenario::Displacement => plain && d.displacements == 1,
            Scenario::SegmentSplit => d.splits == 1 && d.doublings == 0,
            Scenario::DirectoryDoubling => d.splits == 1 && d.doublings == 1,
            Scenario::LhSplit => d.splits >= 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Insert(OwnedKey, u64),
    Remove(OwnedKey),
}

/// A clean table image plus the model of its contents and the operations
/// to crash.
pub struct Prepared {
    pub kind: TableKind,
    pub base: Arc<PersistentPool>,
    pub model: HashMap<OwnedKey, u64>,
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrashReport {
    pub scenario: String,
    pub table: String,
    pub policy: String,
    pub persistence_ops: u64,
    pub points_checked: u64,
    /// Crash points whose image held a duplicated record before recovery.
    pub duplicate_windows: u64,
    pub failures: u64,
    pub first_failure: String,
    #[serde(skip)]
    pub failure_list: Vec<String>,
}

impl CrashReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PolicyKind {
    Strict,
    /// Adversarial with the crash point index as the seed.
    Adversarial,
}

impl PolicyKind {
    fn at(self, i: u64) -> CrashPolicy {
        match self {
            PolicyKind::Strict => CrashPolicy::Strict,
            PolicyKind::Adversarial => CrashPolicy::Adversarial(i),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PolicyKind::Strict => "strict",
            PolicyKind::Adversarial => "adversarial",
        }
    }
}

const POOL_MIB: u64 = 4;

fn small_table(kind: TableKind, pool: Arc<PersistentPool>) -> dash_core::Result<Arc<dyn HashIndex>> {
    Ok(match kind {
        TableKind::Eh => Arc::new(DashEh::create(pool, EhConfig { buckets: 16, stash: 2, ..Default::default() })?),
        TableKind::Lh => Arc::new(DashLh::create(
            pool,
            LhConfig { buckets: 16, stash: 2, base_segments: 2, stride: 2, ..Default::default() },
        )?),
    })
}

/// Grows a small table until the next insert performs `scenario`, then
/// shuts it down cleanly. The search forks the live pool for every
/// candidate key.
pub fn prepare(scenario: Scenario, seed: u64) -> Result<Prepared, String> {
    let err = |e: dash_core::Error| e.to_string();
    let kind = scenario.table();
    let pool = Arc::new(PersistentPool::in_memory(POOL_MIB * MIN_CAPACITY, PoolMode::CrashSim).map_err(err)?);
    let t = small_table(kind, pool.clone()).map_err(err)?;
    let keys = KeySpace::new(seed, KeyKind::Inline8);
    let mut model = HashMap::new();
    // Plain inserts are only interesting once buckets are non-trivial.
    let warm = if scenario == Scenario::BucketInsert { 300 } else { 0 };
    for i in 0..20_000u64 {
        let k = keys.key(i);
        if i >= warm {
            let probe = restart_table(kind, Arc::new(pool.fork())).map_err(err)?;
            probe.recover_all().map_err(err)?;
            let before = probe.metrics();
            probe.insert(k.as_key(), i).map_err(err)?;
            if scenario.matches(&probe.metrics().since(&before)) {
                t.shutdown().map_err(err)?;
                return Ok(Prepared { kind, base: pool, model, ops: vec![Op::Insert(k, i)] });
            }
        }
        t.insert(k.as_key(), i).map_err(err)?;
        model.insert(k, i);
    }
    Err(format!("no key triggers {}", scenario.name()))
}

/// A preloaded table followed by a random insert/remove sequence.
pub fn prepare_workload(kind: TableKind, preload: u64, ops: u64, seed: u64) -> Result<Prepared, String> {
    let err = |e: dash_core::Error| e.to_string();
    let mib = (POOL_MIB + (preload + ops) / 10_000).next_power_of_two();
    let pool = Arc::new(PersistentPool::in_memory(mib * MIN_CAPACITY, PoolMode::CrashSim).map_err(err)?);
    let t = small_table(kind, pool.clone()).map_err(err)?;
    let keys = KeySpace::new(seed, KeyKind::Inline8);
    let mut model = HashMap::new();
    for i in 0..preload {
        t.insert(keys.key(i).as_key(), i).map_err(err)?;
        model.insert(keys.key(i), i);
    }
    t.shutdown().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = preload;
    let seq = (0..ops)
        .map(|_| {
            if rng.gen_bool(0.7) || next == 0 {
                next += 1;
                Op::Insert(keys.key(next - 1), next - 1)
            } else {
                Op::Remove(keys.key(rng.gen_range(0..next)))
            }
        })
        .collect();
    Ok(Prepared { kind, base: pool, model, ops: seq })
}

fn apply(t: &dyn HashIndex, op: &Op) -> dash_core::Result<bool> {
    match op {
        Op::Insert(k, v) => Ok(t.insert(k.as_key(), *v)? == InsertOutcome::Inserted),
        Op::Remove(k) => t.remove(k.as_key()),
    }
}

fn apply_model(model: &mut HashMap<OwnedKey, u64>, op: &Op) -> bool {
    match op {
        Op::Insert(k, v) => {
            if model.contains_key(k) {
                false
            } else {
                model.insert(k.clone(), *v);
                true
            }
        }
        Op::Remove(k) => model.remove(k).is_some(),
    }
}

/// Number of persistence ops the operation sequence issues on a clean
/// restart of the base image.
pub fn count_ops(p: &Prepared) -> Result<u64, String> {
    let err = |e: dash_core::Error| e.to_string();
    let fork = Arc::new(p.base.fork());
    let t = restart_table(p.kind, fork.clone()).map_err(err)?;
    let before = fork.stats();
    for op in &p.ops {
        apply(t.as_ref(), op).map_err(err)?;
    }
    Ok(fork.stats().since(&before).ops())
}

/// Checks one crash point. Returns whether the image held a duplicate
/// record before recovery.
fn check_point(p: &Prepared, i: u64, policy: PolicyKind) -> Result<bool, String> {
    let err = |e: dash_core::Error| format!("point {i}: {e}");
    let fork = Arc::new(p.base.fork());
    let t = restart_table(p.kind, fork.clone()).map_err(err)?;
    fork.arm_crash(i);
    let mut model = p.model.clone();
    let mut in_flight = None;
    for op in &p.ops {
        let got = apply(t.as_ref(), op).map_err(err)?;
        if fork.is_frozen() {
            in_flight = Some(op.clone());
            break;
        }
        let want = apply_model(&mut model, op);
        if got != want {
            return Err(format!("point {i}: {op:?} returned {got}, model says {want}"));
        }
    }
    drop(t);
    let image = fork.crash(policy.at(i)).map_err(err)?;
    let back = restart_table(p.kind, Arc::new(image)).map_err(err)?;

    let raw = back.scan();
    let mut seen = HashMap::new();
    let duplicated = raw.iter().any(|(k, _)| seen.insert(k.clone(), ()).is_some());

    back.recover_all().map_err(err)?;
    let mut got: HashMap<OwnedKey, u64> = HashMap::new();
    for (k, v) in back.scan() {
        if got.insert(k.clone(), v).is_some() {
            return Err(format!("point {i}: key {k:?} present twice after recovery"));
        }
    }
    let matches_model = |m: &HashMap<OwnedKey, u64>| *m == got;
    let ok = matches_model(&model)
        || in_flight.as_ref().is_some_and(|op| {
            let mut applied = model.clone();
            apply_model(&mut applied, op);
            matches_model(&applied)
        });
    if !ok {
        let missing = model.keys().filter(|k| !got.contains_key(*k)).count();
        let extra = got.keys().filter(|k| !model.contains_key(*k)).count();
        return Err(format!(
            "point {i}: contents diverge (in flight {in_flight:?}, {missing} missing, {extra} unexpected)"
        ));
    }
    for k in got.keys().chain(model.keys()) {
        if back.search(k.as_key()).map_err(err)? != got.get(k).copied() {
            return Err(format!("point {i}: search for {k:?} disagrees with scan"));
        }
    }
    let structure = back.check_structure();
    if !structure.is_empty() {
        return Err(format!("point {i}: {}", structure.join("; ")));
    }
    let reachable = back.owned_blocks().into_iter().collect();
    let heap = back.pool().audit_heap().violations(&reachable);
    if !heap.is_empty() {
        return Err(format!("point {i}: heap audit: {}", heap.join("; ")));
    }
    let probe = OwnedKey::Int(u64::MAX - i);
    if back.key_mode() == KeyMode::Inline && !model.contains_key(&probe) {
        back.insert(probe.as_key(), 1).map_err(err)?;
        if back.search(probe.as_key()).map_err(err)? != Some(1) {
            return Err(format!("point {i}: table unusable after recovery"));
        }
    }
    Ok(duplicated)
}

/// Enumerates crash points `0..=ops` (every persistence op plus "after
/// everything"), or at most `limit` of them spread evenly.
pub fn sweep(p: &Prepared, label: &str, limit: Option<u64>, policy: PolicyKind) -> Result<CrashReport, String> {
    let total = count_ops(p)?;
    let points: Vec<u64> = match limit {
        Some(0) => Vec::new(),
        Some(n) if n <= total => (0..n).map(|j| j * (total + 1) / n).collect(),
        _ => (0..=total).collect(),
    };
    let mut failures = Vec::new();
    let mut dups = 0;
    for &i in &points {
        match check_point(p, i, policy) {
            Ok(d) => dups += d as u64,
            Err(e) => failures.push(e),
        }
    }
    Ok(CrashReport {
        scenario: label.to_string(),
        table: p.kind.to_string(),
        policy: policy.name().to_string(),
        persistence_ops: total,
        points_checked: points.len() as u64,
        duplicate_windows: dups,
        failures: failures.len() as u64,
        first_failure: failures.first().cloned().unwrap_or_default(),
        failure_list: failures,
    })
}

pub fn crash_sweep(scenario: Scenario, seed: u64, limit: Option<u64>, policy: PolicyKind) -> Result<CrashReport, String> {
    let p = prepare(scenario, seed)?;
    sweep(&p, scenario.name(), limit, policy)
}
