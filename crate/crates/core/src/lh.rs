//! Linear hashing over segments with hybrid expansion.
//!
//! Segment `x` lives in a segment array reached through directory entry `e`;
//! entry `i` holds `M * 2^(i / s)` segments and is allocated on first need.
//! The split pointer and round number are packed into one word. Expansion
//! only advances that word; the split itself is carried out by whichever
//! writer next touches a segment that is behind its target level.
//!
//! Root block layout:
//!
//! ```text
//! [0..8)    table kind
//! [8..16)   key mode
//! [16..24)  normal buckets per segment (K)
//! [24..32)  stash buckets per segment (S)
//! [32..40)  base segment count (M)
//! [40..48)  stride (s)
//! [48..56)  packed round/next word: N << 32 | Next
//! [64..)    directory entries, 32 * s handles
//! ```
//!
//! A segment's meta word stores its level in the depth byte and its index in
//! the prefix field. A segment at level `l` holds exactly the keys whose
//! address bits are congruent to its index modulo `M * 2^l`.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::hashcore::bucket::Bucket;
use crate::hashcore::key::{stored_hash, OwnedKey, Probe};
use crate::hashcore::{fingerprint, Key, KeyMode, SLOTS};
use crate::metrics::{MetricsSnapshot, TableMetrics};
use crate::persist::PersistentPool;
use crate::segment::{
    delete_slots, mirror_record, place_exclusive, place_fixed, Geometry, InsertPolicy, InsertStep, Meta, Place,
    Probed, RemoveStep, Segment, CHAIN_LINK, H_CHAIN, STATE_NEW, STATE_NORMAL, STATE_SPLITTING,
};
use crate::table::{
    create_root, mark_clean, open_root, restart_protocol, HashIndex, InsertOutcome, ReadHook, RestartStats, Runtime,
    KIND_LH,
};

const R_KEY_MODE: u64 = 8;
const R_K: u64 = 16;
const R_S: u64 = 24;
const R_M: u64 = 32;
const R_STRIDE: u64 = 40;
const R_PACKED: u64 = 48;
const R_ENTRIES: u64 = 64;

/// Doubling groups the entry table is sized for.
pub const GROUPS: u64 = 32;

/// Address bits start above the fingerprint and bucket-index bits.
pub const ADDR_SHIFT: u32 = 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LhConfig {
    pub buckets: usize,
    pub stash: usize,
    pub base_segments: u64,
    pub stride: u64,
    pub key_mode: KeyMode,
    /// Also advance the split pointer whenever an insert leaves the load
    /// factor above this threshold.
    pub split_load_factor: Option<f64>,
}

impl Default for LhConfig {
    fn default() -> Self {
        LhConfig { buckets: 64, stash: 2, base_segments: 64, stride: 8, key_mode: KeyMode::Inline, split_load_factor: None }
    }
}

impl LhConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.buckets.is_power_of_two() || !(4..=64).contains(&self.buckets) {
            return Err(Error::InvalidConfig(format!(
                "normal buckets per segment must be a power of two in 4..=64, got {}",
                self.buckets
            )));
        }
        if !(1..=4).contains(&self.stash) {
            return Err(Error::InvalidConfig(format!("stash buckets must be 1..=4, got {}", self.stash)));
        }
        if !self.base_segments.is_power_of_two() || self.base_segments > 1 << 16 {
            return Err(Error::InvalidConfig(format!(
                "base segment count must be a power of two up to 65536, got {}",
                self.base_segments
            )));
        }
        if !(1..=64).contains(&self.stride) {
            return Err(Error::InvalidConfig(format!("stride must be 1..=64, got {}", self.stride)));
        }
        Ok(())
    }
}

// ---- addressing ----

#[inline]
pub fn pack(n: u32, next: u32) -> u64 {
    (n as u64) << 32 | next as u64
}

#[inline]
pub fn unpack(w: u64) -> (u32, u32) {
    ((w >> 32) as u32, w as u32)
}

/// Segment index of hash `h` under the packed round/next word.
#[inline]
pub fn lh_addr(h: u64, packed: u64, m: u64) -> u64 {
    let (n, next) = unpack(packed);
    let u = h >> ADDR_SHIFT;
    let idx = u & ((m << n) - 1);
    if idx < next as u64 {
        u & ((m << (n + 1)) - 1)
    } else {
        idx
    }
}

/// Number of segments held by directory entry `e`.
#[inline]
pub fn entry_len(e: u64, m: u64, s: u64) -> u64 {
    m << (e / s)
}

/// Directory entry and offset of segment `x`.
pub fn lh_locate(x: u64, m: u64, s: u64) -> Result<(u64, u64)> {
    let q = (x / (s * m) + 1).ilog2() as u64;
    let rem = x - s * m * ((1 << q) - 1);
    let len = m << q;
    let e = q * s + rem / len;
    if e >= GROUPS * s {
        return Err(Error::InvalidConfig(format!("segment index {x} beyond directory capacity")));
    }
    Ok((e, rem % len))
}

/// Inverse of [`lh_locate`].
pub fn lh_index(e: u64, off: u64, m: u64, s: u64) -> u64 {
    let q = e / s;
    s * m * ((1 << q) - 1) + (e % s) * (m << q) + off
}

/// Level a segment has when it first comes into existence.
#[inline]
pub fn birth_level(x: u64, m: u64) -> u32 {
    if x < m {
        0
    } else {
        (x / m).ilog2() + 1
    }
}

/// Segment that `x` splits off from.
#[inline]
pub fn parent(x: u64, m: u64) -> u64 {
    x - (m << (birth_level(x, m) - 1))
}

/// Level segment `x` should reach under the packed word.
#[inline]
pub fn target_level(x: u64, packed: u64, m: u64) -> u32 {
    let (n, next) = unpack(packed);
    if x < next as u64 || x >= m << n {
        n + 1
    } else {
        n
    }
}

pub struct DashLh {
    rt: Runtime,
    root: u64,
    geo: Geometry,
    m: u64,
    stride: u64,
    m_bits: u32,
    /// Last packed word known to be persistent; all addressing uses it.
    packed: AtomicU64,
    array_lock: Mutex<()>,
    segments: AtomicU64,
    chain_buckets: AtomicU64,
    split_lf: Option<f64>,
}

impl DashLh {
    pub fn create(pool: Arc<PersistentPool>, cfg: LhConfig) -> Result<Self> {
        cfg.validate()?;
        let geo = Geometry { k: cfg.buckets, s: cfg.stash, mode: cfg.key_mode };
        let (m, s) = (cfg.base_segments, cfg.stride);
        let root = create_root(&pool, R_ENTRIES + 8 * GROUPS * s, |r| {
            pool.store_u64(r, KIND_LH);
            pool.store_u64(r + R_KEY_MODE, cfg.key_mode.tag());
            pool.store_u64(r + R_K, cfg.buckets as u64);
            pool.store_u64(r + R_S, cfg.stash as u64);
            pool.store_u64(r + R_M, m);
            pool.store_u64(r + R_STRIDE, s);
            Ok(())
        })?;
        let v = pool.header().global_version;
        let stats = RestartStats { clean: false, wrapped: false, global_version: v, work: Default::default() };
        let t = DashLh::from_parts(Runtime::new(pool, v, stats), root, geo, cfg.split_load_factor);
        t.ensure_array(0)?;
        for x in 0..m {
            t.alloc_segment(x, Meta { depth: 0, state: STATE_NORMAL, redo: false, prefix: x as u32 }, 0)?;
        }
        t.segments.store(m, Ordering::Relaxed);
        t.rt.counts_valid.store(true, Ordering::SeqCst);
        Ok(t)
    }

    /// Reopens a table after a clean shutdown or a crash. Performs a constant
    /// amount of persistent work; segments recover lazily on first access.
    pub fn restart(pool: Arc<PersistentPool>) -> Result<Self> {
        let root = open_root(&pool, KIND_LH, "linear hashing")?;
        let geo = Geometry {
            k: pool.load_u64(root + R_K) as usize,
            s: pool.load_u64(root + R_S) as usize,
            mode: KeyMode::from_tag(pool.load_u64(root + R_KEY_MODE))?,
        };
        let m = pool.load_u64(root + R_M);
        let stride = pool.load_u64(root + R_STRIDE);
        let stats = restart_protocol(&pool, |stamp| {
            for e in 0..GROUPS * stride {
                let arr = pool.load_u64(root + R_ENTRIES + 8 * e);
                if arr == 0 {
                    continue;
                }
                for off in 0..entry_len(e, m, stride) {
                    let seg = pool.load_u64(arr + 8 * off);
                    if seg != 0 {
                        Segment::new(&pool, seg, geo).set_version(stamp)?;
                    }
                }
            }
            Ok(())
        })?;
        let rt = Runtime::new(pool, stats.global_version, stats);
        Ok(DashLh::from_parts(rt, root, geo, None))
    }

    fn from_parts(rt: Runtime, root: u64, geo: Geometry, split_lf: Option<f64>) -> Self {
        let pool = &rt.pool;
        let m = pool.load_u64(root + R_M);
        let stride = pool.load_u64(root + R_STRIDE);
        let packed = pool.load_u64(root + R_PACKED);
        DashLh {
            root,
            geo,
            m,
            stride,
            m_bits: m.ilog2(),
            packed: AtomicU64::new(packed),
            array_lock: Mutex::new(()),
            segments: AtomicU64::new(0),
            chain_buckets: AtomicU64::new(0),
            split_lf,
            rt,
        }
    }

    pub fn set_read_hook(&self, hook: Option<ReadHook>) {
        self.rt.set_read_hook(hook);
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    pub fn base_segments(&self) -> u64 {
        self.m
    }

    pub fn stride(&self) -> u64 {
        self.stride
    }

    /// Current `(N, Next)`.
    pub fn round(&self) -> (u32, u32) {
        unpack(self.packed.load(Ordering::SeqCst))
    }

    /// Number of addressable segments, `M * 2^N + Next`.
    pub fn addressable(&self) -> u64 {
        let (n, next) = self.round();
        (self.m << n) + next as u64
    }

    fn pool_ref(&self) -> &PersistentPool {
        &self.rt.pool
    }

    fn seg(&self, base: u64) -> Segment<'_> {
        Segment::new(self.pool_ref(), base, self.geo)
    }

    fn entry_slot(&self, e: u64) -> u64 {
        self.root + R_ENTRIES + 8 * e
    }

    /// Pool slot holding the handle of segment `x`, if its array exists.
    pub fn segment_slot(&self, x: u64) -> Option<u64> {
        let (e, off) = lh_locate(x, self.m, self.stride).ok()?;
        let arr = self.pool_ref().load_u64(self.entry_slot(e));
        (arr != 0).then_some(arr + 8 * off)
    }

    pub fn segment_handle(&self, x: u64) -> u64 {
        self.segment_slot(x).map_or(0, |s| self.pool_ref().load_u64(s))
    }

    /// Allocated directory entries and their array handles.
    pub fn arrays(&self) -> Vec<(u64, u64)> {
        (0..GROUPS * self.stride)
            .map(|e| (e, self.pool_ref().load_u64(self.entry_slot(e))))
            .filter(|&(_, a)| a != 0)
            .collect()
    }

    /// Every allocated segment as `(index, handle)`.
    pub fn populated(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        for (e, arr) in self.arrays() {
            for off in 0..entry_len(e, self.m, self.stride) {
                let h = self.pool_ref().load_u64(arr + 8 * off);
                if h != 0 {
                    out.push((lh_index(e, off, self.m, self.stride), h));
                }
            }
        }
        out
    }

    fn ensure_array(&self, x: u64) -> Result<()> {
        let (e, _) = lh_locate(x, self.m, self.stride)?;
        let slot = self.entry_slot(e);
        if self.pool_ref().load_u64(slot) != 0 {
            return Ok(());
        }
        let _g = self.array_lock.lock();
        if self.pool_ref().load_u64(slot) == 0 {
            self.pool_ref().alloc_into(8 * entry_len(e, self.m, self.stride), slot, false, |_| Ok(()))?;
        }
        Ok(())
    }

    fn alloc_segment(&self, x: u64, meta: Meta, source: u64) -> Result<u64> {
        let slot = self
            .segment_slot(x)
            .ok_or_else(|| Error::InvalidConfig(format!("segment array for {x} missing")))?;
        let (pool, geo, v) = (self.pool_ref(), self.geo, self.rt.v());
        pool.alloc_into(geo.segment_bytes(), slot, false, |b| {
            Segment::new(pool, b, geo).init_header(meta, 0, v, source);
            Ok(())
        })
    }

    /// The segment currently responsible for hash `h`: the addressed segment
    /// or, while it has not been split off yet, its closest live ancestor.
    fn holder(&self, h: u64) -> (u64, u64) {
        let mut x = lh_addr(h, self.packed.load(Ordering::SeqCst), self.m);
        loop {
            let s = self.segment_handle(x);
            if s != 0 && self.seg(s).meta().state != STATE_NEW {
                return (x, s);
            }
            x = parent(x, self.m);
        }
    }

    fn check_key(&self, key: &Key) -> Result<()> {
        key.check_mode(self.geo.mode)
    }

    // ---- expansion ----

    /// Moves the split pointer on by one, allocating the segment array the
    /// new image segment will live in.
    pub fn advance_next(&self) -> Result<()> {
        let pool = self.pool_ref();
        let slot = self.root + R_PACKED;
        loop {
            let cur = pool.load_u64(slot);
            let (n, next) = unpack(cur);
            if n as u64 + 1 >= GROUPS {
                return Err(Error::InvalidConfig("split rounds exhausted".into()));
            }
            self.ensure_array((self.m << n) + next as u64)?;
            let new = if next as u64 + 1 == self.m << n { pack(n + 1, 0) } else { pack(n, next + 1) };
            if pool.cas_u64(slot, cur, new).is_ok() {
                pool.persist(slot, 8)?;
                self.packed.fetch_max(new, Ordering::SeqCst);
                TableMetrics::bump(&self.rt.metrics.next_advances);
                return Ok(());
            }
        }
    }

    fn split(&self, x: u64, seg: u64) -> Result<u64> {
        let s = self.seg(seg);
        let held = s.lock_all();
        let m = s.meta();
        let stale = self.segment_handle(x) != seg
            || m.state != STATE_NORMAL
            || m.depth as u32 >= target_level(x, self.packed.load(Ordering::SeqCst), self.m);
        let res = if stale { Ok((0, Vec::new())) } else { self.split_locked(x, &s) };
        s.unlock(&held);
        let (chained, retired) = res?;
        for b in retired {
            self.rt.epoch.retire(b);
        }
        Ok(chained)
    }

    fn bit(&self, h: u64, level: u32) -> bool {
        ((h >> ADDR_SHIFT) >> (self.m_bits + level)) & 1 == 1
    }

    fn split_locked(&self, x: u64, s: &Segment) -> Result<(u64, Vec<u64>)> {
        let m = s.meta();
        s.set_meta(Meta { state: STATE_SPLITTING, ..m })?;
        let c = x + (self.m << m.depth);
        let child = Meta { depth: m.depth + 1, state: STATE_NEW, redo: false, prefix: c as u32 };
        let cb = self.alloc_segment(c, child, s.base)?;
        let n = self.seg(cb);
        let chained = self.rehash(s, &n, false)?;
        s.set_meta(Meta { state: STATE_SPLITTING, redo: true, ..m })?;
        self.install(s, &n)?;
        let retired = self.compact_chain(s)?;
        TableMetrics::bump(&self.rt.metrics.splits);
        self.segments.fetch_add(1, Ordering::Relaxed);
        Ok((chained, retired))
    }

    /// Moves every record of `s` that belongs to its image into `n`. Bucket
    /// records are mirrored first, then chain records are re-inserted. With
    /// `check`, records already present in `n` are not copied again.
    /// Returns the number of chain buckets `n` had to allocate.
    fn rehash(&self, s: &Segment, n: &Segment, check: bool) -> Result<u64> {
        let pool = self.pool_ref();
        let level = s.meta().depth as u32;
        let mut masks: Vec<(u64, u32)> = Vec::new();
        let mut chained = Vec::new();
        for r in s.records() {
            let h = stored_hash(pool, self.geo.mode, r.key_word);
            if !self.bit(h, level) {
                continue;
            }
            let present = check && {
                let k = OwnedKey::load(pool, self.geo.mode, r.key_word);
                n.find_anywhere(&k.as_key(), fingerprint(h)).is_some()
            };
            match r.place {
                Place::Chain(_) => chained.push((h, r, present)),
                _ if !present => mirror_record(s, n, &r)?,
                _ => {}
            }
            match masks.last_mut() {
                Some((b, mk)) if *b == r.bucket => *mk |= 1 << r.slot,
                _ => masks.push((r.bucket, 1 << r.slot)),
            }
        }
        let mut allocs = 0;
        for (h, r, present) in chained {
            if !present {
                let fp = Bucket::new(pool, r.bucket).fp(r.slot);
                if let InsertStep::Inserted { chained: true } =
                    place_exclusive(n, h, r.key_word, r.value, fp, &self.rt.metrics)?
                {
                    allocs += 1;
                }
            }
        }
        for (bucket, mask) in masks {
            delete_slots(pool, bucket, mask)?;
        }
        s.rebuild_overflow();
        n.rebuild_overflow();
        self.chain_buckets.fetch_add(allocs, Ordering::Relaxed);
        Ok(allocs)
    }

    fn install(&self, s: &Segment, n: &Segment) -> Result<()> {
        let nm = n.meta();
        n.set_meta(Meta { state: STATE_NORMAL, ..nm })?;
        let m = s.meta();
        s.set_meta(Meta { depth: nm.depth, state: STATE_NORMAL, redo: false, prefix: m.prefix })
    }

    /// Pulls chain records back into free fixed buckets and unlinks the
    /// chain buckets left empty. Returns the unlinked buckets.
    fn compact_chain(&self, s: &Segment) -> Result<Vec<u64>> {
        let pool = self.pool_ref();
        for c in s.chain() {
            let cb = Bucket::new(pool, c);
            let pk = cb.packed();
            let mut moved = 0u32;
            for slot in (0..SLOTS).filter(|i| pk.alloc() & (1 << i) != 0) {
                let kw = cb.key_word(slot);
                let h = stored_hash(pool, self.geo.mode, kw);
                if place_fixed(s, h, kw, cb.value(slot), cb.fp(slot))? {
                    moved |= 1 << slot;
                }
            }
            delete_slots(pool, c, moved)?;
        }
        s.rebuild_overflow();
        let mut retired = Vec::new();
        let mut link_slot = s.base + H_CHAIN;
        loop {
            let cur = pool.load_u64(link_slot);
            if cur == 0 {
                break;
            }
            if Bucket::new(pool, cur).packed().count() == 0 {
                pool.swap_and_retire(link_slot, pool.load_u64(cur + CHAIN_LINK), cur)?;
                retired.push(cur);
            } else {
                link_slot = cur + CHAIN_LINK;
            }
        }
        self.chain_buckets.fetch_sub(retired.len() as u64, Ordering::Relaxed);
        Ok(retired)
    }

    // ---- recovery ----

    /// Brings one segment up to the current global version, finishing an
    /// interrupted split of it.
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
        s.dedup_chain()?;
        s.rebuild_overflow();
        let m = s.meta();
        if m.state == STATE_SPLITTING {
            let c = m.prefix as u64 + (self.m << m.depth);
            let cb = self.segment_handle(c);
            let n = self.seg(cb);
            if cb != 0 && m.redo {
                self.install(&s, &n)?;
            } else if cb != 0 && n.meta().state == STATE_NEW && n.split_source() == seg {
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
        let segs = self.populated();
        let mut records = 0;
        let mut chain = 0;
        for &(_, h) in &segs {
            let s = self.seg(h);
            records += s.record_count();
            chain += s.chain().len() as u64;
        }
        self.segments.store(segs.len() as u64, Ordering::Relaxed);
        self.chain_buckets.store(chain, Ordering::Relaxed);
        self.rt.records.store(records as i64, Ordering::Relaxed);
        self.rt.counts_valid.store(true, Ordering::Release);
    }

    fn after_insert(&self, chained: u64) -> Result<()> {
        for _ in 0..chained {
            self.advance_next()?;
        }
        if let Some(limit) = self.split_lf {
            if self.load_factor() > limit {
                self.advance_next()?;
            }
        }
        Ok(())
    }
}

impl HashIndex for DashLh {
    fn insert(&self, key: Key, value: u64) -> Result<InsertOutcome> {
        self.check_key(&key)?;
        let h = key.hash();
        let _guard = self.rt.epoch.enter();
        let mut key_word = None;
        loop {
            let (x, seg) = self.holder(h);
            let s = self.seg(seg);
            if s.version() != self.rt.v() {
                self.recover_segment(seg)?;
                continue;
            }
            if (s.meta().depth as u32) < target_level(x, self.packed.load(Ordering::SeqCst), self.m) {
                let chained = self.split(x, seg)?;
                self.after_insert(chained)?;
                continue;
            }
            let validate = || self.holder(h).1 == seg;
            match s.insert(h, &key, value, &mut key_word, InsertPolicy::CHAINED, &validate, &self.rt.metrics)? {
                InsertStep::Inserted { chained } => {
                    TableMetrics::bump(&self.rt.metrics.inserts);
                    self.rt.add_records(1);
                    if chained {
                        self.chain_buckets.fetch_add(1, Ordering::Relaxed);
                    }
                    self.after_insert(chained as u64)?;
                    return Ok(InsertOutcome::Inserted);
                }
                InsertStep::Exists => return Ok(InsertOutcome::KeyExists),
                InsertStep::Retry => continue,
                InsertStep::Full => return Err(Error::BucketFull),
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
            let (_, seg) = self.holder(h);
            let s = self.seg(seg);
            if s.version() != self.rt.v() {
                self.recover_segment(seg)?;
                continue;
            }
            let validate = || self.holder(h).1 == seg;
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
            let (_, seg) = self.holder(h);
            let s = self.seg(seg);
            if s.version() != self.rt.v() {
                self.recover_segment(seg)?;
                continue;
            }
            let validate = || self.holder(h).1 == seg;
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
        self.rt.records.load(Ordering::Relaxed).max(0) as f64 / self.capacity_slots() as f64
    }

    fn capacity_slots(&self) -> u64 {
        self.refresh_counts();
        self.segments.load(Ordering::Relaxed) * self.geo.slots()
            + self.chain_buckets.load(Ordering::Relaxed) * SLOTS as u64
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
        for (_, seg) in self.populated() {
            self.recover_segment(seg)?;
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
        for (_, seg) in self.populated() {
            for r in self.seg(seg).records() {
                out.push((OwnedKey::load(pool, self.geo.mode, r.key_word), r.value));
            }
        }
        out
    }

    fn owned_blocks(&self) -> Vec<u64> {
        let mut out = vec![self.root];
        out.extend(self.arrays().into_iter().map(|(_, a)| a));
        for (_, seg) in self.populated() {
            out.push(seg);
            out.extend(self.seg(seg).chain());
        }
        out
    }

    fn check_structure(&self) -> Vec<String> {
        let pool = self.pool_ref();
        let mut errs = Vec::new();
        let packed = self.packed.load(Ordering::SeqCst);
        let cap = self.addressable();
        let mut seen = HashSet::new();
        for (x, seg) in self.populated() {
            if !seen.insert(seg) {
                errs.push(format!("segment {seg} is referenced twice"));
            }
            if x >= cap {
                errs.push(format!("segment {x} exists beyond the {cap} addressable segments"));
            }
            let s = self.seg(seg);
            let m = s.meta();
            if m.state != STATE_NORMAL || m.redo {
                errs.push(format!("segment {x} left in state {} redo {}", m.state, m.redo));
            }
            if m.prefix as u64 != x {
                errs.push(format!("segment {x} records index {}", m.prefix));
            }
            let level = m.depth as u32;
            if level < birth_level(x, self.m) || level > target_level(x, packed, self.m) {
                errs.push(format!("segment {x} at level {level} outside its allowed range"));
            }
            let modulus = self.m << level;
            for r in s.records() {
                let h = stored_hash(pool, self.geo.mode, r.key_word);
                if (h >> ADDR_SHIFT) % modulus != x {
                    errs.push(format!("record in segment {x} belongs elsewhere"));
                }
                if let Place::Normal(i) = r.place {
                    let home = self.geo.home(h);
                    let ok = if r.member { self.geo.next(home) == i } else { home == i };
                    if !ok {
                        errs.push(format!("record in bucket {i} of segment {x} is misplaced"));
                    }
                }
            }
        }
        for x in 0..cap {
            if lh_locate(x, self.m, self.stride).is_err() || self.segment_slot(x).is_none() {
                errs.push(format!("segment array for addressable segment {x} missing"));
            }
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
        self.seg(self.holder(h).1).stash_candidates(h)
    }

    fn positive_overflow_counts(&self) -> u64 {
        self.populated().into_iter().map(|(_, s)| s).map(|s| self.seg(s).positive_overflow_counts()).sum()
    }
}
