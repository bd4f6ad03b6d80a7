//! Extendible hashing over segments.
//!
//! The directory is indexed by the top `G` bits of the hash; a segment of
//! local depth `L` owns the `2^(G-L)` contiguous entries sharing its prefix.
//! Segments form a list through their side links, in prefix order.
//!
//! Root block layout:
//!
//! ```text
//! [0..8)    table kind
//! [8..16)   key mode
//! [16..24)  directory handle
//! [24..32)  normal buckets per segment (K)
//! [32..40)  stash buckets per segment (S)
//! [40..48)  initial global depth
//! ```
//!
//! Directory block: global depth at `[0..8)`, then `2^G` segment handles.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::hashcore::key::{stored_hash, OwnedKey, Probe};
use crate::hashcore::{fingerprint, Key, KeyMode};
use crate::metrics::{MetricsSnapshot, TableMetrics};
use crate::persist::PersistentPool;
use crate::segment::{
    delete_slots, mirror_record, InsertPolicy, InsertStep, Meta, Place, Probed, RemoveStep, Segment, Geometry,
    STATE_NEW, STATE_NORMAL, STATE_SPLITTING,
};
use crate::table::{
    create_root, mark_clean, open_root, restart_protocol, HashIndex, InsertOutcome, ReadHook, RestartStats, Runtime,
    KIND_EH,
};

const R_KEY_MODE: u64 = 8;
const R_DIR: u64 = 16;
const R_K: u64 = 24;
const R_S: u64 = 32;
const R_G0: u64 = 40;

const MAX_DEPTH: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EhConfig {
    pub buckets: usize,
    pub stash: usize,
    pub initial_depth: u32,
    pub key_mode: KeyMode,
}

impl Default for EhConfig {
    fn default() -> Self {
        EhConfig { buckets: 64, stash: 2, initial_depth: 1, key_mode: KeyMode::Inline }
    }
}

impl EhConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.buckets.is_power_of_two() || !(4..=1024).contains(&self.buckets) {
            return Err(Error::InvalidConfig(format!(
                "normal buckets per segment must be a power of two in 4..=1024, got {}",
                self.buckets
            )));
        }
        if self.stash > 4 {
            return Err(Error::InvalidConfig(format!("at most 4 stash buckets, got {}", self.stash)));
        }
        if !(1..=20).contains(&self.initial_depth) {
            return Err(Error::InvalidConfig(format!("initial depth must be 1..=20, got {}", self.initial_depth)));
        }
        Ok(())
    }
}

pub struct DashEh {
    rt: Runtime,
    root: u64,
    geo: Geometry,
    dir_lock: Mutex<()>,
    segments: AtomicU64,
}

/// Directory-index of `h` under global depth `g`.
#[inline]
pub fn dir_index(h: u64, g: u64) -> u64 {
    h >> (64 - g)
}

impl DashEh {
    pub fn create(pool: Arc<PersistentPool>, cfg: EhConfig) -> Result<Self> {
        cfg.validate()?;
        let geo = Geometry { k: cfg.buckets, s: cfg.stash, mode: cfg.key_mode };
        let root = create_root(&pool, 64, |r| {
            pool.store_u64(r, KIND_EH);
            pool.store_u64(r + R_KEY_MODE, cfg.key_mode.tag());
            pool.store_u64(r + R_K, cfg.buckets as u64);
            pool.store_u64(r + R_S, cfg.stash as u64);
            pool.store_u64(r + R_G0, cfg.initial_depth as u64);
            Ok(())
        })?;
        let g = cfg.initial_depth as u64;
        let dir = pool.alloc_into(8 + (8 << g), root + R_DIR, false, |d| {
            pool.store_u64(d, g);
            Ok(())
        })?;
        let v = pool.header().global_version;
        let mut prev: Option<u64> = None;
        for i in 0..(1u64 << g) {
            let seg = pool.alloc_into(geo.segment_bytes(), dir + 8 + 8 * i, false, |s| {
                let meta = Meta { depth: g as u8, state: STATE_NORMAL, redo: false, prefix: i as u32 };
                Segment::new(&pool, s, geo).init_header(meta, 0, v, 0);
                Ok(())
            })?;
            if let Some(p) = prev {
                Segment::new(&pool, p, geo).set_side_link(seg)?;
            }
            prev = Some(seg);
        }
        let stats = RestartStats { clean: false, wrapped: false, global_version: v, work: Default::default() };
        let rt = Runtime::new(pool, v, stats);
        rt.counts_valid.store(true, Ordering::SeqCst);
        Ok(DashEh { rt, root, geo, dir_lock: Mutex::new(()), segments: AtomicU64::new(1 << g) })
    }

    /// Reopens a table after a clean shutdown or a crash. Performs a constant
    /// amount of persistent work; segments recover lazily on first access.
    pub fn restart(pool: Arc<PersistentPool>) -> Result<Self> {
        let root = open_root(&pool, KIND_EH, "extendible hashing")?;
        let geo = Geometry {
            k: pool.load_u64(root + R_K) as usize,
            s: pool.load_u64(root + R_S) as usize,
            mode: KeyMode::from_tag(pool.load_u64(root + R_KEY_MODE))?,
        };
        let stats = restart_protocol(&pool, |stamp| {
            let dir = pool.load_u64(root + R_DIR);
            let mut cur = pool.load_u64(dir + 8);
            while cur != 0 {
                let s = Segment::new(&pool, cur, geo);
                s.set_version(stamp)?;
                cur = s.side_link();
            }
            Ok(())
        })?;
        let rt = Runtime::new(pool, stats.global_version, stats);
        Ok(DashEh { rt, root, geo, dir_lock: Mutex::new(()), segments: AtomicU64::new(0) })
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    pub fn set_read_hook(&self, hook: Option<ReadHook>) {
        self.rt.set_read_hook(hook);
    }

    fn pool_ref(&self) -> &PersistentPool {
        &self.rt.pool
    }

    fn seg(&self, base: u64) -> Segment<'_> {
        Segment::new(self.pool_ref(), base, self.geo)
    }

    pub fn directory(&self) -> u64 {
        self.pool_ref().load_u64(self.root + R_DIR)
    }

    pub fn global_depth(&self) -> u64 {
        self.pool_ref().load_u64(self.directory())
    }

    pub fn directory_entries(&self) -> Vec<u64> {
        let pool = self.pool_ref();
        let dir = self.directory();
        let g = pool.load_u64(dir);
        (0..1u64 << g).map(|i| pool.load_u64(dir + 8 + 8 * i)).collect()
    }

    #[inline]
    fn locate(&self, h: u64) -> u64 {
        let pool = self.pool_ref();
        let dir = pool.load_u64(self.root + R_DIR);
        let g = pool.load_u64(dir);
        pool.load_u64(dir + 8 + 8 * dir_index(h, g))
    }

    /// First segment of the side-link list (prefix zero).
    fn first_segment(&self) -> u64 {
        self.pool_ref().load_u64(self.directory() + 8)
    }

    pub fn segment_handles(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut cur = self.first_segment();
        while cur != 0 {
            out.push(cur);
            cur = self.seg(cur).side_link();
        }
        out
    }

    fn check_key(&self, key: &Key) -> Result<()> {
        key.check_mode(self.geo.mode)
    }

    // ---- structural modification ----

    fn split(&self, seg: u64, h: u64, depth_seen: u8) -> Result<()> {
        let s = self.seg(seg);
        let held = s.lock_all();
        let m = s.meta();
        let res = if self.locate(h) != seg || m.depth != depth_seen || m.state != STATE_NORMAL {
            Ok(())
        } else {
            self.split_locked(&s)
        };
        s.unlock(&held);
        res
    }

    fn split_locked(&self, s: &Segment) -> Result<()> {
        let pool = self.pool_ref();
        let m = s.meta();
        let l = m.depth as u64;
        if l + 1 > MAX_DEPTH {
            return Err(Error::InvalidConfig("segment depth limit reached".into()));
        }
        {
            let _d = self.dir_lock.lock();
            if l == self.global_depth() {
                self.double_locked()?;
            }
        }
        s.set_meta(Meta { state: STATE_SPLITTING, ..m })?;
        let old_side = s.side_link();
        let v = self.rt.v();
        let geo = self.geo;
        let n_base = pool.alloc_into(geo.segment_bytes(), s.side_slot(), false, |nb| {
            let meta = Meta { depth: m.depth + 1, state: STATE_NEW, redo: false, prefix: (m.prefix << 1) | 1 };
            Segment::new(pool, nb, geo).init_header(meta, old_side, v, s.base);
            Ok(())
        })?;
        let n = self.seg(n_base);
        self.rehash(s, &n, false)?;
        s.set_meta(Meta { state: STATE_SPLITTING, redo: true, ..m })?;
        self.install(s, &n)?;
        TableMetrics::bump(&self.rt.metrics.splits);
        self.segments.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Moves every record of `s` whose next hash bit is one into `n`,
    /// mirroring its position. With `check`, records already present in `n`
    /// are not copied again.
    fn rehash(&self, s: &Segment, n: &Segment, check: bool) -> Result<()> {
        let pool = self.pool_ref();
        let l = s.meta().depth as u32;
        let mut masks: Vec<(u64, u32)> = Vec::new();
        for r in s.records() {
            let h = stored_hash(pool, self.geo.mode, r.key_word);
            if (h >> (63 - l)) & 1 == 0 {
                continue;
            }
            let present = check && {
                let k = OwnedKey::load(pool, self.geo.mode, r.key_word);
                n.find_anywhere(&k.as_key(), fingerprint(h)).is_some()
            };
            if !present {
                mirror_record(s, n, &r)?;
            }
            match masks.last_mut() {
                Some((b, m)) if *b == r.bucket => *m |= 1 << r.slot,
                _ => masks.push((r.bucket, 1 << r.slot)),
            }
        }
        for (bucket, mask) in masks {
            delete_slots(pool, bucket, mask)?;
        }
        s.rebuild_overflow();
        n.rebuild_overflow();
        Ok(())
    }

    /// Points `n`'s directory range at it and finishes both segments' metadata.
    /// Idempotent, so recovery can replay it.
    fn install(&self, s: &Segment, n: &Segment) -> Result<()> {
        let pool = self.pool_ref();
        let _d = self.dir_lock.lock();
        let nm = n.meta();
        let dir = self.directory();
        let g = pool.load_u64(dir);
        let shift = g - nm.depth as u64;
        let start = (nm.prefix as u64) << shift;
        let span = 1u64 << shift;
        for i in start..start + span {
            pool.store_u64(dir + 8 + 8 * i, n.base);
        }
        pool.persist(dir + 8 + 8 * start, 8 * span)?;
        n.set_meta(Meta { state: STATE_NORMAL, ..nm })?;
        s.set_meta(Meta { depth: nm.depth, state: STATE_NORMAL, redo: false, prefix: nm.prefix & !1 })
    }

    /// Doubles the directory. Caller holds the directory lock.
    fn double_locked(&self) -> Result<()> {
        let pool = self.pool_ref();
        let old = self.directory();
        let g = pool.load_u64(old);
        if g + 1 > MAX_DEPTH {
            return Err(Error::InvalidConfig("directory depth limit reached".into()));
        }
        let entries = 1u64 << g;
        pool.alloc_into(8 + 16 * entries, self.root + R_DIR, true, |nd| {
            pool.store_u64(nd, g + 1);
            for i in 0..entries {
                let e = pool.load_u64(old + 8 + 8 * i);
                pool.store_u64(nd + 8 + 16 * i, e);
                pool.store_u64(nd + 16 + 16 * i, e);
            }
            Ok(())
        })?;
        self.rt.epoch.retire(old);
        TableMetrics::bump(&self.rt.metrics.doublings);
        Ok(())
    }

    // ---- recovery ----

    /// Brings one segment up to the current global version: clears locks,
    /// drops displacement duplicates, rebuilds overflow metadata and
    /// finishes or rolls back an interrupted split.
    pub fn recover_segment(&self, seg: u64) -> Result<()> {
        let _g = self.rt.recovery_lock(seg);
        let s = self.seg(seg);
        let v = self.rt.v();
        if s.version() == v {
            return Ok(());
        }
        if s.meta().state == STATE_NEW {
            let src = s.split_source();
            if src != 0 && src != seg {
                self.recover_segment(src)?;
            }
        }
        s.clear_locks();
        s.dedup()?;
        s.rebuild_overflow();
        let m = s.meta();
        if m.state == STATE_SPLITTING {
            let side = s.side_link();
            let n = self.seg(side);
            if m.redo {
                self.install(&s, &n)?;
            } else if side != 0 && n.meta().state == STATE_NEW && n.split_source() == seg {
                n.clear_locks();
                self.rehash(&s, &n, true)?;
                s.set_meta(Meta { redo: true, ..m })?;
                self.install(&s, &n)?;
            } else {
                s.set_meta(Meta { state: STATE_NORMAL, redo: false, ..m })?;
            }
        }
        s.set_version(v)?;
        TableMetrics::bump(&self.rt.metrics.segment_recoveries);
        Ok(())
    }

    fn refresh_counts(&self) {
        if self.rt.counts_valid.load(Ordering::Acquire) {
            return;
        }
        let segs = self.segment_handles();
        let records: u64 = segs.iter().map(|&s| self.seg(s).record_count()).sum();
        self.segments.store(segs.len() as u64, Ordering::Relaxed);
        self.rt.records.store(records as i64, Ordering::Relaxed);
        self.rt.counts_valid.store(true, Ordering::Release);
    }
}

impl HashIndex for DashEh {
    fn insert(&self, key: Key, value: u64) -> Result<InsertOutcome> {
        self.check_key(&key)?;
        let h = key.hash();
        let _guard = self.rt.epoch.enter();
        let mut key_word = None;
        loop {
            let seg = self.locate(h);
            let s = self.seg(seg);
            if s.version() != self.rt.v() {
                self.recover_segment(seg)?;
                continue;
            }
            let validate = || self.locate(h) == seg;
            match s.insert(h, &key, value, &mut key_word, InsertPolicy::STASH, &validate, &self.rt.metrics)? {
                InsertStep::Inserted { .. } => {
                    TableMetrics::bump(&self.rt.metrics.inserts);
                    self.rt.add_records(1);
                    return Ok(InsertOutcome::Inserted);
                }
                InsertStep::Exists => return Ok(InsertOutcome::KeyExists),
                InsertStep::Retry => continue,
                InsertStep::Full => {
                    let depth = s.meta().depth;
                    self.split(seg, h, depth)?;
                }
            }
        }
    }

    fn search(&self, key: Key) -> Result<Option<u64>> {
        self.check_key(&key)?;
        let h = key.hash();
        let _guard = self.rt.epoch.enter();
        let hook = self.rt.read_hook();
        let mut probe = Probe::default();
        let out = loop {
            let seg = self.locate(h);
            let s = self.seg(seg);
            if s.version() != self.rt.v() {
                self.recover_segment(seg)?;
                continue;
            }
            let validate = || self.locate(h) == seg;
            match s.read(h, &key, &mut probe, &validate, hook.as_deref().map(|f| f as &dyn Fn())) {
                Probed::Found(v) => break Some(v),
                Probed::Absent => break None,
                Probed::Retry => {
                    probe.retries += 1;
                    std::hint::spin_loop();
                }
            }
        };
        self.rt.metrics.record_search(&probe, out.is_some());
        Ok(out)
    }

    fn remove(&self, key: Key) -> Result<bool> {
        self.check_key(&key)?;
        let h = key.hash();
        let _guard = self.rt.epoch.enter();
        loop {
            let seg = self.locate(h);
            let s = self.seg(seg);
            if s.version() != self.rt.v() {
                self.recover_segment(seg)?;
                continue;
            }
            let validate = || self.locate(h) == seg;
            match s.remove(h, &key, &validate)? {
                RemoveStep::Removed => {
                    TableMetrics::bump(&self.rt.metrics.removes);
                    self.rt.add_records(-1);
                    return Ok(true);
                }
                RemoveStep::Absent => return Ok(false),
                RemoveStep::Retry => continue,
            }
        }
    }

    fn load_factor(&self) -> f64 {
        self.refresh_counts();
        self.rt.records.load(Ordering::Relaxed).max(0) as f64 / self.capacity_slots() as f64
    }

    fn capacity_slots(&self) -> u64 {
        self.refresh_counts();
        self.segments.load(Ordering::Relaxed) * self.geo.slots()
    }

    fn metrics(&self) -> MetricsSnapshot {
        self.rt.metrics.snapshot()
    }

    fn pool(&self) -> &Arc<PersistentPool> {
        &self.rt.pool
    }

    fn key_mode(&self) -> KeyMode {
        self.geo.mode
    }

    fn recover_all(&self) -> Result<()> {
        let mut cur = self.first_segment();
        while cur != 0 {
            self.recover_segment(cur)?;
            cur = self.seg(cur).side_link();
        }
        self.rt.counts_valid.store(false, Ordering::Release);
        self.refresh_counts();
        Ok(())
    }

    fn shutdown(&self) -> Result<()> {
        mark_clean(self.pool_ref())
    }

    fn scan(&self) -> Vec<(OwnedKey, u64)> {
        let pool = self.pool_ref();
        let mut out = Vec::new();
        for seg in self.segment_handles() {
            for r in self.seg(seg).records() {
                out.push((OwnedKey::load(pool, self.geo.mode, r.key_word), r.value));
            }
        }
        out
    }

    fn owned_blocks(&self) -> Vec<u64> {
        let mut out = vec![self.root, self.directory()];
        out.extend(self.segment_handles());
        out
    }

    fn check_structure(&self) -> Vec<String> {
        let pool = self.pool_ref();
        let mut errs = Vec::new();
        let entries = self.directory_entries();
        let g = self.global_depth();
        let mut covered = 0u64;
        let mut seen = HashSet::new();
        let mut last_prefix_end = 0u64;
        for seg in self.segment_handles() {
            if !seen.insert(seg) {
                errs.push(format!("segment {seg} appears twice in the side-link list"));
                break;
            }
            let s = self.seg(seg);
            let m = s.meta();
            if m.state != STATE_NORMAL || m.redo {
                errs.push(format!("segment {seg} left in state {} redo {}", m.state, m.redo));
            }
            let l = m.depth as u64;
            if l > g {
                errs.push(format!("segment {seg} depth {l} exceeds global depth {g}"));
                continue;
            }
            let start = (m.prefix as u64) << (g - l);
            let span = 1u64 << (g - l);
            if start != last_prefix_end {
                errs.push(format!("segment {seg} starts at entry {start}, expected {last_prefix_end}"));
            }
            last_prefix_end = start + span;
            for i in start..start + span {
                if entries.get(i as usize) != Some(&seg) {
                    errs.push(format!("directory entry {i} does not point to segment {seg}"));
                }
            }
            covered += span;
            for r in s.records() {
                let h = stored_hash(pool, self.geo.mode, r.key_word);
                if l > 0 && (h >> (64 - l)) as u32 != m.prefix {
                    errs.push(format!("record in segment {seg} does not match its prefix"));
                }
                if let Place::Normal(i) = r.place {
                    let home = self.geo.home(h);
                    let ok = if r.member { self.geo.next(home) == i } else { home == i };
                    if !ok {
                        errs.push(format!("record in bucket {i} of {seg} is misplaced"));
                    }
                }
            }
        }
        if covered != entries.len() as u64 {
            errs.push(format!("segments cover {covered} of {} directory entries", entries.len()));
        }
        errs
    }

    fn segment_count(&self) -> u64 {
        self.refresh_counts();
        self.segments.load(Ordering::Relaxed)
    }

    fn restart_stats(&self) -> RestartStats {
        self.rt.restart
    }

    fn drain_retired(&self) -> usize {
        self.rt.drain_retired()
    }

    fn stash_candidates(&self, key: Key) -> u32 {
        let h = key.hash();
        self.seg(self.locate(h)).stash_candidates(h)
    }

    fn positive_overflow_counts(&self) -> u64 {
        self.segment_handles().into_iter().map(|s| self.seg(s).positive_overflow_counts()).sum()
    }
}
