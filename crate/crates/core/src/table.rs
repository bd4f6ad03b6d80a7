//! Pieces shared by both table variants: the public trait, the restart
//! protocol and per-process runtime state.

use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::{ReentrantMutex, RwLock};

use crate::error::{Error, Result};
use crate::hashcore::{Key, KeyMode, OwnedKey};
use crate::metrics::{MetricsSnapshot, TableMetrics};
use crate::persist::pool::{HDR_CLEAN, HDR_GLOBAL_VERSION, HDR_ROOT};
use crate::persist::{PersistStats, PersistentPool};
use crate::reclaim::EpochManager;

pub const KIND_EH: u64 = 1;
pub const KIND_LH: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    KeyExists,
}

/// Operations common to both table variants.
pub trait HashIndex: Send + Sync {
    fn insert(&self, key: Key, value: u64) -> Result<InsertOutcome>;
    fn search(&self, key: Key) -> Result<Option<u64>>;
    fn remove(&self, key: Key) -> Result<bool>;
    fn load_factor(&self) -> f64;
    fn capacity_slots(&self) -> u64;
    fn metrics(&self) -> MetricsSnapshot;
    fn pool(&self) -> &Arc<PersistentPool>;
    fn key_mode(&self) -> KeyMode;
    /// Runs lazy recovery on every segment now.
    fn recover_all(&self) -> Result<()>;
    /// Marks the pool cleanly shut down. The table must not be used after.
    fn shutdown(&self) -> Result<()>;
    /// Every record, in no particular order. Not linearizable.
    fn scan(&self) -> Vec<(OwnedKey, u64)>;
    /// Pool handles of every block the table owns.
    fn owned_blocks(&self) -> Vec<u64>;
    /// Structural invariant violations (empty when consistent).
    fn check_structure(&self) -> Vec<String>;
    fn segment_count(&self) -> u64;
    fn restart_stats(&self) -> RestartStats;
    /// Releases every retired block that no thread can still reach.
    fn drain_retired(&self) -> usize;
    /// Stash buckets a lookup of `key` would probe after missing in its
    /// two candidate buckets, as a bitmask. Not linearizable.
    fn stash_candidates(&self, key: Key) -> u32;
    /// Normal buckets, over all segments, whose overflow count is positive.
    fn positive_overflow_counts(&self) -> u64;
}

/// Persistent work done by restart before the table serves requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RestartStats {
    pub clean: bool,
    pub wrapped: bool,
    pub global_version: u8,
    pub work: PersistStats,
}

pub type ReadHook = Arc<dyn Fn() + Send + Sync>;

const RECOVERY_STRIPES: usize = 64;

/// Volatile state kept next to a table.
pub struct Runtime {
    pub pool: Arc<PersistentPool>,
    pub version: AtomicU8,
    pub epoch: EpochManager<u64>,
    pub metrics: TableMetrics,
    recovery: Box<[ReentrantMutex<()>]>,
    pub records: AtomicI64,
    pub counts_valid: AtomicBool,
    hook_on: AtomicBool,
    hook: RwLock<Option<ReadHook>>,
    pub restart: RestartStats,
}

impl Runtime {
    pub fn new(pool: Arc<PersistentPool>, version: u8, restart: RestartStats) -> Self {
        let p = pool.clone();
        let epoch = EpochManager::new(move |h: u64| {
            // A block that is no longer on the limbo list was already
            // reclaimed by reconciliation; nothing else can fail here.
            let _ = p.free_retired(h);
        });
        for h in pool.retired_handles() {
            epoch.retire(h);
        }
        Runtime {
            pool,
            version: AtomicU8::new(version),
            epoch,
            metrics: TableMetrics::default(),
            recovery: (0..RECOVERY_STRIPES).map(|_| ReentrantMutex::new(())).collect(),
            records: AtomicI64::new(0),
            counts_valid: AtomicBool::new(false),
            hook_on: AtomicBool::new(false),
            hook: RwLock::new(None),
            restart,
        }
    }

    pub fn v(&self) -> u8 {
        self.version.load(Ordering::Relaxed)
    }

    pub fn recovery_lock(&self, seg: u64) -> parking_lot::ReentrantMutexGuard<'_, ()> {
        self.recovery[((seg >> 6) as usize) % RECOVERY_STRIPES].lock()
    }

    pub fn set_read_hook(&self, hook: Option<ReadHook>) {
        self.hook_on.store(hook.is_some(), Ordering::SeqCst);
        *self.hook.write() = hook;
    }

    pub fn read_hook(&self) -> Option<ReadHook> {
        if self.hook_on.load(Ordering::Relaxed) {
            self.hook.read().clone()
        } else {
            None
        }
    }

    pub fn drain_retired(&self) -> usize {
        let mut n = 0;
        for _ in 0..3 {
            n += self.epoch.try_advance_and_drain();
        }
        n
    }

    pub fn add_records(&self, d: i64) {
        self.records.fetch_add(d, Ordering::Relaxed);
    }
}

/// Allocates the table root block into the pool header.
pub fn create_root(pool: &PersistentPool, size: u64, init: impl FnOnce(u64) -> Result<()>) -> Result<u64> {
    if pool.load_u64(HDR_ROOT) != 0 {
        return Err(Error::InvalidConfig("pool already holds a table".into()));
    }
    let root = pool.alloc_into(size, HDR_ROOT, false, init)?;
    // Serving from now on: a crash must bump the global version.
    pool.store_u8(HDR_CLEAN, 0);
    pool.persist(HDR_CLEAN, 1)?;
    Ok(root)
}

pub fn open_root(pool: &PersistentPool, kind: u64, name: &'static str) -> Result<u64> {
    let root = pool.load_u64(HDR_ROOT);
    if root == 0 || pool.load_u64(root) != kind {
        return Err(Error::WrongTableKind { expected: name });
    }
    Ok(root)
}

/// Constant-work restart. On the crash path the global version moves on so
/// every segment recovers lazily on first touch. `stamp_all` runs only when
/// the one-byte version wraps.
pub fn restart_protocol(pool: &PersistentPool, stamp_all: impl FnOnce(u8) -> Result<()>) -> Result<RestartStats> {
    let before = pool.stats();
    let clean = pool.load_u8(HDR_CLEAN) != 0;
    let mut wrapped = false;
    let v = pool.load_u8(HDR_GLOBAL_VERSION);
    let v = if clean {
        pool.store_u8(HDR_CLEAN, 0);
        pool.persist(HDR_CLEAN, 1)?;
        v
    } else {
        let (next, overflow) = v.overflowing_add(1);
        if overflow {
            wrapped = true;
            stamp_all(1)?;
        }
        pool.store_u8(HDR_GLOBAL_VERSION, next);
        pool.persist(HDR_GLOBAL_VERSION, 1)?;
        next
    };
    Ok(RestartStats {
        clean,
        wrapped,
        global_version: v,
        work: pool.stats().since(&before),
    })
}

pub fn mark_clean(pool: &PersistentPool) -> Result<()> {
    pool.write_back_all()?;
    pool.store_u8(HDR_CLEAN, 1);
    pool.persist(HDR_CLEAN, 1)
}
