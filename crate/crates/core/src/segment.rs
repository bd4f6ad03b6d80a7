//! Segments: a 64-byte header followed by `K` normal and `S` stash buckets,
//! plus an optional chain of extra stash buckets (linear hashing only).
//!
//! Header layout:
//!
//! ```text
//! [0..8)    meta word: depth/level | state << 8 | redo << 16 | prefix << 32
//! [8..16)   side link
//! [16]      segment version
//! [24..32)  split source (set on segments born from a split)
//! [32..40)  stash chain head
//! ```

use crate::error::Result;
use crate::hashcore::bucket::{clear_overflow_meta, set_overflow_meta, Bucket, BUCKET_SIZE, SLOTS};
use crate::hashcore::key::{key_matches, stored_hash, Key, KeyMode, Probe};
use crate::hashcore::fingerprint;
use crate::hashcore::lock::is_locked;
use crate::metrics::TableMetrics;
use crate::persist::PersistentPool;

pub const SEG_HEADER: u64 = 64;
const H_META: u64 = 0;
const H_SIDE: u64 = 8;
const H_VERSION: u64 = 16;
const H_SOURCE: u64 = 24;
pub const H_CHAIN: u64 = 32;

/// Chain buckets carry their successor link right after the bucket.
pub const CHAIN_LINK: u64 = BUCKET_SIZE;
pub const CHAIN_BLOCK: u64 = BUCKET_SIZE + 8;

pub const STATE_NORMAL: u8 = 0;
pub const STATE_SPLITTING: u8 = 1;
pub const STATE_NEW: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Meta {
    pub depth: u8,
    pub state: u8,
    pub redo: bool,
    pub prefix: u32,
}

impl Meta {
    pub fn pack(self) -> u64 {
        self.depth as u64 | (self.state as u64) << 8 | (self.redo as u64) << 16 | (self.prefix as u64) << 32
    }

    pub fn unpack(w: u64) -> Meta {
        Meta {
            depth: w as u8,
            state: (w >> 8) as u8,
            redo: (w >> 16) & 1 == 1,
            prefix: (w >> 32) as u32,
        }
    }
}

/// Shape shared by every segment of a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub k: usize,
    pub s: usize,
    pub mode: KeyMode,
}

impl Geometry {
    pub fn segment_bytes(&self) -> u64 {
        SEG_HEADER + (self.k + self.s) as u64 * BUCKET_SIZE
    }

    pub fn slots(&self) -> u64 {
        ((self.k + self.s) * SLOTS) as u64
    }

    #[inline]
    pub fn home(&self, h: u64) -> usize {
        ((h >> 8) as usize) & (self.k - 1)
    }

    #[inline]
    pub fn next(&self, i: usize) -> usize {
        (i + 1) & (self.k - 1)
    }

    #[inline]
    pub fn prev(&self, i: usize) -> usize {
        (i + self.k - 1) & (self.k - 1)
    }
}

/// Which insertion techniques the bucket path may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertPolicy {
    pub probing: bool,
    pub balanced: bool,
    pub displacement: bool,
    pub stash: bool,
    pub chain: bool,
}

impl InsertPolicy {
    pub const BUCKETIZED: Self = Self { probing: false, balanced: false, displacement: false, stash: false, chain: false };
    pub const PROBING: Self = Self { probing: true, ..Self::BUCKETIZED };
    pub const BALANCED: Self = Self { balanced: true, displacement: true, ..Self::PROBING };
    pub const STASH: Self = Self { stash: true, ..Self::BALANCED };
    pub const CHAINED: Self = Self { chain: true, ..Self::STASH };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probed {
    Found(u64),
    Absent,
    Retry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertStep {
    Inserted { chained: bool },
    Exists,
    Retry,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemoveStep {
    Removed,
    Absent,
    Retry,
}

/// Where a record lives inside a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Place {
    Normal(usize),
    Stash(usize),
    Chain(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub place: Place,
    pub bucket: u64,
    pub slot: usize,
    pub key_word: u64,
    pub value: u64,
    pub member: bool,
}

#[derive(Clone, Copy)]
pub struct Segment<'a> {
    pub pool: &'a PersistentPool,
    pub base: u64,
    pub geo: Geometry,
}

impl<'a> Segment<'a> {
    pub fn new(pool: &'a PersistentPool, base: u64, geo: Geometry) -> Self {
        Segment { pool, base, geo }
    }

    // ---- header ----

    pub fn meta(&self) -> Meta {
        Meta::unpack(self.pool.load_u64(self.base + H_META))
    }

    pub fn set_meta(&self, m: Meta) -> Result<()> {
        self.pool.store_u64(self.base + H_META, m.pack());
        self.pool.persist(self.base + H_META, 8)
    }

    pub fn side_link(&self) -> u64 {
        self.pool.load_u64(self.base + H_SIDE)
    }

    pub fn side_slot(&self) -> u64 {
        self.base + H_SIDE
    }

    pub fn set_side_link(&self, h: u64) -> Result<()> {
        self.pool.store_u64(self.base + H_SIDE, h);
        self.pool.persist(self.base + H_SIDE, 8)
    }

    pub fn version(&self) -> u8 {
        self.pool.load_u8(self.base + H_VERSION)
    }

    pub fn set_version(&self, v: u8) -> Result<()> {
        self.pool.store_u8(self.base + H_VERSION, v);
        self.pool.persist(self.base + H_VERSION, 1)
    }

    pub fn split_source(&self) -> u64 {
        self.pool.load_u64(self.base + H_SOURCE)
    }

    pub fn chain_head(&self) -> u64 {
        self.pool.load_u64(self.base + H_CHAIN)
    }

    /// Writes header fields of a freshly allocated (zeroed) segment. The
    /// caller persists the block.
    pub fn init_header(&self, meta: Meta, side: u64, version: u8, source: u64) {
        self.pool.store_u64(self.base + H_META, meta.pack());
        self.pool.store_u64(self.base + H_SIDE, side);
        self.pool.store_u8(self.base + H_VERSION, version);
        self.pool.store_u64(self.base + H_SOURCE, source);
    }

    // ---- buckets ----

    #[inline]
    pub fn bucket(&self, i: usize) -> Bucket<'a> {
        Bucket::new(self.pool, self.base + SEG_HEADER + i as u64 * BUCKET_SIZE)
    }

    #[inline]
    pub fn stash(&self, j: usize) -> Bucket<'a> {
        self.bucket(self.geo.k + j)
    }

    pub fn chain(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut cur = self.chain_head();
        while cur != 0 {
            out.push(cur);
            cur = self.pool.load_u64(cur + CHAIN_LINK);
        }
        out
    }

    /// Locks every bucket including chain buckets, in address order.
    pub fn lock_all(&self) -> Vec<u64> {
        let mut held = Vec::new();
        for i in 0..self.geo.k + self.geo.s {
            let b = self.bucket(i);
            b.lock().lock();
            held.push(b.off);
        }
        let mut link_slot = self.base + H_CHAIN;
        loop {
            let next = self.pool.load_u64(link_slot);
            if next == 0 {
                break;
            }
            let b = Bucket::new(self.pool, next);
            b.lock().lock();
            held.push(next);
            link_slot = next + CHAIN_LINK;
        }
        held
    }

    pub fn unlock(&self, held: &[u64]) {
        for &off in held.iter().rev() {
            Bucket::new(self.pool, off).lock().unlock();
        }
    }

    // ---- lock-free read ----

    /// One optimistic lookup attempt. `validate` re-checks that this segment
    /// is still the right one for `h` after the bucket snapshots were taken.
    /// `hook` runs between reading the target bucket and verifying it.
    pub fn read(
        &self,
        h: u64,
        key: &Key,
        probe: &mut Probe,
        validate: &dyn Fn() -> bool,
        hook: Option<&dyn Fn()>,
    ) -> Probed {
        let fp = fingerprint(h);
        let bi = self.geo.home(h);
        let b = self.bucket(bi);
        let p = self.bucket(self.geo.next(bi));
        let vt = b.lock().read();
        let vp = p.lock().read();
        if !validate() || is_locked(vt) || is_locked(vp) {
            return Probed::Retry;
        }
        let r = b.search(key, fp, probe);
        if let Some(hook) = hook {
            hook();
        }
        if !b.lock().verify(vt) {
            return Probed::Retry;
        }
        if let Some((_, v)) = r {
            return Probed::Found(v);
        }
        let r = p.search(key, fp, probe);
        if !p.lock().verify(vp) {
            return Probed::Retry;
        }
        if let Some((_, v)) = r {
            return Probed::Found(v);
        }
        let absent = || {
            if b.lock().verify(vt) && p.lock().verify(vp) {
                Probed::Absent
            } else {
                Probed::Retry
            }
        };
        let ob = b.overflow();
        if !ob.bit() {
            return absent();
        }
        let scan_all = ob.count() > 0;
        let hits = if scan_all {
            (1u32 << self.geo.s) - 1
        } else {
            b.overflow_hits(ob, fp, false) | p.overflow_hits(p.overflow(), fp, true)
        };
        if !b.lock().verify(vt) || !p.lock().verify(vp) {
            return Probed::Retry;
        }
        if let Some(hook) = hook {
            hook();
        }
        let mut hits = hits;
        while hits != 0 {
            let j = hits.trailing_zeros() as usize;
            hits &= hits - 1;
            probe.stash_probes += 1;
            let sb = self.stash(j);
            let vs = sb.lock().read();
            if is_locked(vs) {
                return Probed::Retry;
            }
            let r = sb.search(key, fp, probe);
            if !sb.lock().verify(vs) {
                return Probed::Retry;
            }
            if let Some((_, v)) = r {
                return Probed::Found(v);
            }
        }
        if scan_all {
            let mut cur = self.chain_head();
            while cur != 0 {
                probe.stash_probes += 1;
                let cb = Bucket::new(self.pool, cur);
                let vs = cb.lock().read();
                if is_locked(vs) {
                    return Probed::Retry;
                }
                let r = cb.search(key, fp, probe);
                let next = self.pool.load_u64(cur + CHAIN_LINK);
                if !cb.lock().verify(vs) {
                    return Probed::Retry;
                }
                if let Some((_, v)) = r {
                    return Probed::Found(v);
                }
                cur = next;
            }
        }
        absent()
    }

    // ---- writers ----

    /// Locks `b` and its probing bucket in ascending order.
    fn lock_pair(&self, bi: usize, with_probe: bool) -> (Bucket<'a>, Bucket<'a>) {
        let pi = self.geo.next(bi);
        let b = self.bucket(bi);
        let p = self.bucket(pi);
        if !with_probe {
            b.lock().lock();
        } else if bi < pi {
            b.lock().lock();
            p.lock().lock();
        } else {
            p.lock().lock();
            b.lock().lock();
        }
        (b, p)
    }

    fn unlock_pair(&self, b: &Bucket, p: &Bucket, with_probe: bool) {
        b.lock().unlock();
        if with_probe {
            p.lock().unlock();
        }
    }

    /// Finds the stash bucket holding `key`, with `b` and `p` locked so the
    /// overflow metadata is stable.
    fn find_overflow(&self, b: &Bucket, p: &Bucket, key: &Key, fp: u8, probe: &mut Probe) -> Option<(Place, Bucket<'a>, usize)> {
        let ob = b.overflow();
        if !ob.bit() {
            return None;
        }
        let scan_all = ob.count() > 0;
        let mut hits = if scan_all {
            (1u32 << self.geo.s) - 1
        } else {
            b.overflow_hits(ob, fp, false) | p.overflow_hits(p.overflow(), fp, true)
        };
        while hits != 0 {
            let j = hits.trailing_zeros() as usize;
            hits &= hits - 1;
            let sb = self.stash(j);
            if let Some((slot, _)) = sb.search(key, fp, probe) {
                return Some((Place::Stash(j), sb, slot));
            }
        }
        if scan_all {
            for c in self.chain() {
                let cb = Bucket::new(self.pool, c);
                if let Some((slot, _)) = cb.search(key, fp, probe) {
                    return Some((Place::Chain(c), cb, slot));
                }
            }
        }
        None
    }

    /// Lock `dest` while already holding lower-ordered locks: blocking when
    /// it sorts after everything held, otherwise a single try.
    fn lock_extra(&self, dest: usize, held_max: usize) -> bool {
        let l = self.bucket(dest).lock();
        if dest > held_max {
            l.lock();
            true
        } else {
            l.try_lock()
        }
    }

    /// Moves the record in `slot` of `src` into `dst`.
    fn move_record(&self, src: &Bucket, slot: usize, dst: &Bucket, member: bool) -> Result<()> {
        dst.insert(src.key_word(slot), src.value(slot), src.fp(slot), member)?;
        src.delete_slot(slot)
    }

    /// Tries to free a slot in `b` or `p` by displacing one resident to its
    /// alternative bucket. Returns the bucket that gained room.
    fn displace(&self, bi: usize, b: &Bucket<'a>, p: &Bucket<'a>) -> Result<Option<(Bucket<'a>, bool)>> {
        let pi = self.geo.next(bi);
        let held_max = bi.max(pi);
        let di = self.geo.next(pi);
        if let Some(slot) = p.first_with_membership(false) {
            if self.lock_extra(di, held_max) {
                let d = self.bucket(di);
                let moved = if !d.packed().is_full() {
                    self.move_record(p, slot, &d, true)?;
                    true
                } else {
                    false
                };
                d.lock().unlock();
                if moved {
                    return Ok(Some((*p, true)));
                }
            }
        }
        let di = self.geo.prev(bi);
        if let Some(slot) = b.first_with_membership(true) {
            if self.lock_extra(di, held_max) {
                let d = self.bucket(di);
                let moved = if !d.packed().is_full() {
                    self.move_record(b, slot, &d, false)?;
                    true
                } else {
                    false
                };
                d.lock().unlock();
                if moved {
                    return Ok(Some((*b, false)));
                }
            }
        }
        Ok(None)
    }

    /// One attempt of the bucket-level insert path. `key_word` caches the
    /// materialized key across retries.
    #[allow(clippy::too_many_arguments)]
    pub fn insert(
        &self,
        h: u64,
        key: &Key,
        value: u64,
        key_word: &mut Option<u64>,
        policy: InsertPolicy,
        validate: &dyn Fn() -> bool,
        metrics: &TableMetrics,
    ) -> Result<InsertStep> {
        let bi = self.geo.home(h);
        let (b, p) = self.lock_pair(bi, policy.probing);
        let out = self.insert_locked(h, bi, &b, &p, key, value, key_word, policy, validate, metrics);
        self.unlock_pair(&b, &p, policy.probing);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn insert_locked(
        &self,
        h: u64,
        bi: usize,
        b: &Bucket<'a>,
        p: &Bucket<'a>,
        key: &Key,
        value: u64,
        key_word: &mut Option<u64>,
        policy: InsertPolicy,
        validate: &dyn Fn() -> bool,
        metrics: &TableMetrics,
    ) -> Result<InsertStep> {
        if !validate() {
            return Ok(InsertStep::Retry);
        }
        let fp = fingerprint(h);
        let mut probe = Probe::default();
        if b.search(key, fp, &mut probe).is_some()
            || p.search(key, fp, &mut probe).is_some()
            || self.find_overflow(b, p, key, fp, &mut probe).is_some()
        {
            return Ok(InsertStep::Exists);
        }
        let kw = match *key_word {
            Some(w) => w,
            None => {
                let w = key.materialize(self.pool)?;
                *key_word = Some(w);
                w
            }
        };

        let (bp, pp) = (b.packed(), p.packed());
        if !policy.probing {
            if !bp.is_full() {
                b.insert(kw, value, fp, false)?;
                return Ok(InsertStep::Inserted { chained: false });
            }
            return Ok(InsertStep::Full);
        }
        if !bp.is_full() || !pp.is_full() {
            let into_b = if policy.balanced { !bp.is_full() && bp.count() <= pp.count() } else { !bp.is_full() };
            if into_b {
                b.insert(kw, value, fp, false)?;
            } else {
                p.insert(kw, value, fp, true)?;
            }
            return Ok(InsertStep::Inserted { chained: false });
        }
        if policy.displacement {
            if let Some((room, member)) = self.displace(bi, b, p)? {
                TableMetrics::bump(&metrics.displacements);
                room.insert(kw, value, fp, member)?;
                return Ok(InsertStep::Inserted { chained: false });
            }
        }
        if policy.stash {
            for j in 0..self.geo.s {
                let sb = self.stash(j);
                sb.lock().lock();
                let done = if !sb.packed().is_full() {
                    sb.insert(kw, value, fp, false)?;
                    set_overflow_meta(b, p, fp, Some(j));
                    true
                } else {
                    false
                };
                sb.lock().unlock();
                if done {
                    TableMetrics::bump(&metrics.stash_inserts);
                    return Ok(InsertStep::Inserted { chained: false });
                }
            }
        }
        if policy.chain && self.geo.s > 0 {
            return self.insert_chain(b, p, kw, value, fp, metrics);
        }
        Ok(InsertStep::Full)
    }

    /// Inserts into the first chain bucket with room, appending a new one
    /// when the chain is exhausted.
    fn insert_chain(&self, b: &Bucket, p: &Bucket, kw: u64, value: u64, fp: u8, metrics: &TableMetrics) -> Result<InsertStep> {
        // The last fixed stash bucket guards the chain head slot.
        let mut guard = self.stash(self.geo.s - 1);
        let mut link_slot = self.base + H_CHAIN;
        guard.lock().lock();
        loop {
            let next = self.pool.load_u64(link_slot);
            if next == 0 {
                let pool = self.pool;
                let nb = pool.alloc_into(CHAIN_BLOCK, link_slot, false, |_| Ok(()));
                let nb = match nb {
                    Ok(nb) => nb,
                    Err(e) => {
                        guard.lock().unlock();
                        return Err(e);
                    }
                };
                let cb = Bucket::new(pool, nb);
                let r = cb.insert(kw, value, fp, false);
                guard.lock().unlock();
                r?;
                set_overflow_meta(b, p, fp, None);
                TableMetrics::bump(&metrics.chain_allocs);
                return Ok(InsertStep::Inserted { chained: true });
            }
            let cb = Bucket::new(self.pool, next);
            cb.lock().lock();
            guard.lock().unlock();
            if !cb.packed().is_full() {
                let r = cb.insert(kw, value, fp, false);
                cb.lock().unlock();
                r?;
                set_overflow_meta(b, p, fp, None);
                TableMetrics::bump(&metrics.stash_inserts);
                return Ok(InsertStep::Inserted { chained: false });
            }
            guard = cb;
            link_slot = next + CHAIN_LINK;
        }
    }

    pub fn remove(&self, h: u64, key: &Key, validate: &dyn Fn() -> bool) -> Result<RemoveStep> {
        let fp = fingerprint(h);
        let bi = self.geo.home(h);
        let (b, p) = self.lock_pair(bi, true);
        let out = (|| {
            if !validate() {
                return Ok(RemoveStep::Retry);
            }
            let mut probe = Probe::default();
            if b.delete(key, fp, &mut probe)? || p.delete(key, fp, &mut probe)? {
                return Ok(RemoveStep::Removed);
            }
            if let Some((place, sb, _)) = self.find_overflow(&b, &p, key, fp, &mut probe) {
                sb.lock().lock();
                let r = sb.delete(key, fp, &mut probe);
                sb.lock().unlock();
                if r? {
                    let stash = match place {
                        Place::Stash(j) => Some(j),
                        _ => None,
                    };
                    clear_overflow_meta(&b, &p, fp, stash);
                    return Ok(RemoveStep::Removed);
                }
            }
            Ok(RemoveStep::Absent)
        })();
        self.unlock_pair(&b, &p, true);
        out
    }

    // ---- whole-segment helpers (caller has exclusive access) ----

    fn bucket_records(&self, place: Place, b: &Bucket) -> impl Iterator<Item = Record> + '_ {
        let pk = b.packed();
        let off = b.off;
        let pool = self.pool;
        (0..SLOTS).filter(move |i| pk.alloc() & (1 << i) != 0).map(move |slot| {
            let bk = Bucket::new(pool, off);
            Record {
                place,
                bucket: off,
                slot,
                key_word: bk.key_word(slot),
                value: bk.value(slot),
                member: pk.membership() & (1 << slot) != 0,
            }
        })
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for i in 0..self.geo.k {
            out.extend(self.bucket_records(Place::Normal(i), &self.bucket(i)));
        }
        for j in 0..self.geo.s {
            out.extend(self.bucket_records(Place::Stash(j), &self.stash(j)));
        }
        for c in self.chain() {
            out.extend(self.bucket_records(Place::Chain(c), &Bucket::new(self.pool, c)));
        }
        out
    }

    pub fn record_count(&self) -> u64 {
        let mut n = 0;
        for i in 0..self.geo.k + self.geo.s {
            n += self.bucket(i).packed().count() as u64;
        }
        for c in self.chain() {
            n += Bucket::new(self.pool, c).packed().count() as u64;
        }
        n
    }

    /// Searches every bucket for `key`.
    pub fn find_anywhere(&self, key: &Key, fp: u8) -> Option<(u64, usize)> {
        let mut probe = Probe::default();
        for i in 0..self.geo.k + self.geo.s {
            let b = self.bucket(i);
            if let Some((slot, _)) = b.search(key, fp, &mut probe) {
                return Some((b.off, slot));
            }
        }
        for c in self.chain() {
            let b = Bucket::new(self.pool, c);
            if let Some((slot, _)) = b.search(key, fp, &mut probe) {
                return Some((c, slot));
            }
        }
        None
    }

    pub fn clear_locks(&self) {
        for i in 0..self.geo.k + self.geo.s {
            self.bucket(i).lock().clear();
        }
        for c in self.chain() {
            Bucket::new(self.pool, c).lock().clear();
        }
    }

    /// Removes the probing-bucket copy of any record that also sits in its
    /// target bucket (left behind by an interrupted displacement).
    pub fn dedup(&self) -> Result<usize> {
        let mut removed = 0;
        let mut probe = Probe::default();
        for i in 0..self.geo.k {
            let b = self.bucket(i);
            let home = self.bucket(self.geo.prev(i));
            let pk = b.packed();
            let mut dup_mask = 0u32;
            let mut m = pk.alloc() & pk.membership();
            while m != 0 {
                let slot = m.trailing_zeros() as usize;
                m &= m - 1;
                let fp = b.fp(slot);
                let kw = b.key_word(slot);
                let hp = home.packed();
                let mut cand = home.matching(fp) & !hp.membership();
                while cand != 0 {
                    let hs = cand.trailing_zeros() as usize;
                    cand &= cand - 1;
                    if same_key(self.pool, self.geo.mode, home.key_word(hs), kw, &mut probe) {
                        dup_mask |= 1 << slot;
                        break;
                    }
                }
            }
            if dup_mask != 0 {
                removed += dup_mask.count_ones() as usize;
                let pk = b.packed();
                let next = crate::hashcore::Packed::compose(pk.alloc() & !dup_mask, pk.membership() & !dup_mask);
                self.pool.store_u32(b.off + 4, next.0);
                self.pool.persist(b.off, 64)?;
            }
        }
        Ok(removed)
    }

    /// Removes chain copies of records that also sit in a normal or fixed
    /// stash bucket (left behind by an interrupted chain compaction).
    pub fn dedup_chain(&self) -> Result<usize> {
        let mut removed = 0;
        let mut probe = Probe::default();
        for c in self.chain() {
            let cb = Bucket::new(self.pool, c);
            let mut dup_mask = 0u32;
            let mut m = cb.packed().alloc();
            while m != 0 {
                let slot = m.trailing_zeros() as usize;
                m &= m - 1;
                let kw = cb.key_word(slot);
                let fp = cb.fp(slot);
                let bi = self.geo.home(stored_hash(self.pool, self.geo.mode, kw));
                let fixed = [bi, self.geo.next(bi)].into_iter().chain((0..self.geo.s).map(|j| self.geo.k + j));
                let dup = fixed.into_iter().any(|i| {
                    let b = self.bucket(i);
                    let mut cand = b.matching(fp);
                    while cand != 0 {
                        let s = cand.trailing_zeros() as usize;
                        cand &= cand - 1;
                        if same_key(self.pool, self.geo.mode, b.key_word(s), kw, &mut probe) {
                            return true;
                        }
                    }
                    false
                });
                if dup {
                    dup_mask |= 1 << slot;
                }
            }
            if dup_mask != 0 {
                removed += dup_mask.count_ones() as usize;
                delete_slots(self.pool, c, dup_mask)?;
            }
        }
        Ok(removed)
    }

    /// Recomputes all overflow metadata from stash and chain contents.
    pub fn rebuild_overflow(&self) {
        for i in 0..self.geo.k {
            self.bucket(i).reset_overflow();
        }
        let place = |h: u64| {
            let bi = self.geo.home(h);
            (self.bucket(bi), self.bucket(self.geo.next(bi)))
        };
        for j in 0..self.geo.s {
            let sb = self.stash(j);
            for r in self.bucket_records(Place::Stash(j), &sb).collect::<Vec<_>>() {
                let h = stored_hash(self.pool, self.geo.mode, r.key_word);
                let (b, p) = place(h);
                set_overflow_meta(&b, &p, sb.fp(r.slot), Some(j));
            }
        }
        for c in self.chain() {
            let cb = Bucket::new(self.pool, c);
            for r in self.bucket_records(Place::Chain(c), &cb).collect::<Vec<_>>() {
                let h = stored_hash(self.pool, self.geo.mode, r.key_word);
                let (b, p) = place(h);
                set_overflow_meta(&b, &p, cb.fp(r.slot), None);
            }
        }
    }

    /// Stash buckets a lookup of `h` would have to probe after missing in
    /// its two candidate buckets, as a bitmask.
    pub fn stash_candidates(&self, h: u64) -> u32 {
        let bi = self.geo.home(h);
        let b = self.bucket(bi);
        let p = self.bucket(self.geo.next(bi));
        let ob = b.overflow();
        if !ob.bit() {
            0
        } else if ob.count() > 0 {
            (1u32 << self.geo.s) - 1
        } else {
            let fp = fingerprint(h);
            b.overflow_hits(ob, fp, false) | p.overflow_hits(p.overflow(), fp, true)
        }
    }

    /// Normal buckets whose overflow count is positive.
    pub fn positive_overflow_counts(&self) -> u64 {
        (0..self.geo.k).filter(|&i| self.bucket(i).overflow().count() > 0).count() as u64
    }

    /// Overflow words of the normal buckets, for comparison in tests.
    pub fn overflow_words(&self) -> Vec<u64> {
        (0..self.geo.k).map(|i| self.bucket(i).overflow().0).collect()
    }

    pub fn load_factor(&self) -> f64 {
        self.record_count() as f64 / self.geo.slots() as f64
    }
}

fn same_key(pool: &PersistentPool, mode: KeyMode, a: u64, b: u64, probe: &mut Probe) -> bool {
    match mode {
        KeyMode::Inline => a == b,
        KeyMode::Variable => {
            let kb = pool.key_bytes(b);
            key_matches(pool, a, &Key::Bytes(&kb), probe)
        }
    }
}

/// Copies the record `r` into `dst`, placing it in the same bucket index and
/// with the same membership it had in its source segment.
pub fn mirror_record(src: &Segment, dst: &Segment, r: &Record) -> Result<()> {
    let sb = Bucket::new(src.pool, r.bucket);
    let fp = sb.fp(r.slot);
    let target = match r.place {
        Place::Normal(i) => dst.bucket(i),
        Place::Stash(j) => dst.stash(j),
        Place::Chain(_) => unreachable!("chain records are re-inserted, not mirrored"),
    };
    target.insert(r.key_word, r.value, fp, r.member)?;
    Ok(())
}

/// Clears the given slots of one bucket with a single metadata store.
pub fn delete_slots(pool: &PersistentPool, bucket: u64, mask: u32) -> Result<()> {
    if mask == 0 {
        return Ok(());
    }
    let b = Bucket::new(pool, bucket);
    let pk = b.packed();
    let next = crate::hashcore::Packed::compose(pk.alloc() & !mask, pk.membership() & !mask);
    pool.store_u32(bucket + 4, next.0);
    pool.persist(bucket, 64)
}

/// Places a record in a normal or fixed stash bucket of a segment the caller
/// has exclusive access to. Returns false when all of them are full.
pub fn place_fixed(seg: &Segment, h: u64, key_word: u64, value: u64, fp: u8) -> Result<bool> {
    let bi = seg.geo.home(h);
    let b = seg.bucket(bi);
    let p = seg.bucket(seg.geo.next(bi));
    let (bp, pp) = (b.packed(), p.packed());
    if !bp.is_full() || !pp.is_full() {
        if !bp.is_full() && bp.count() <= pp.count() {
            b.insert(key_word, value, fp, false)?;
        } else {
            p.insert(key_word, value, fp, true)?;
        }
        return Ok(true);
    }
    for j in 0..seg.geo.s {
        let sb = seg.stash(j);
        if !sb.packed().is_full() {
            sb.insert(key_word, value, fp, false)?;
            set_overflow_meta(&b, &p, fp, Some(j));
            return Ok(true);
        }
    }
    Ok(false)
}

/// Inserts a record into a segment nobody else can reach (a split target or
/// the segment under recovery) using the full policy, without locking.
pub fn place_exclusive(seg: &Segment, h: u64, key_word: u64, value: u64, fp: u8, metrics: &TableMetrics) -> Result<InsertStep> {
    if place_fixed(seg, h, key_word, value, fp)? {
        return Ok(InsertStep::Inserted { chained: false });
    }
    let bi = seg.geo.home(h);
    let b = seg.bucket(bi);
    let p = seg.bucket(seg.geo.next(bi));
    let mut link_slot = seg.base + H_CHAIN;
    loop {
        let next = seg.pool.load_u64(link_slot);
        if next == 0 {
            let nb = seg.pool.alloc_into(CHAIN_BLOCK, link_slot, false, |_| Ok(()))?;
            Bucket::new(seg.pool, nb).insert(key_word, value, fp, false)?;
            set_overflow_meta(&b, &p, fp, None);
            TableMetrics::bump(&metrics.chain_allocs);
            return Ok(InsertStep::Inserted { chained: true });
        }
        let cb = Bucket::new(seg.pool, next);
        if !cb.packed().is_full() {
            cb.insert(key_word, value, fp, false)?;
            set_overflow_meta(&b, &p, fp, None);
            return Ok(InsertStep::Inserted { chained: false });
        }
        link_slot = next + CHAIN_LINK;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashcore::hash_u64;
    use crate::persist::{PoolMode, MIN_CAPACITY};

    fn setup(k: usize, s: usize) -> (PersistentPool, Geometry, u64) {
        let pool = PersistentPool::in_memory(4 * MIN_CAPACITY, PoolMode::CrashSim).unwrap();
        let geo = Geometry { k, s, mode: KeyMode::Inline };
        let base = pool.alloc_into(geo.segment_bytes(), crate::persist::pool::HDR_ROOT, false, |_| Ok(())).unwrap();
        (pool, geo, base)
    }

    fn fill(seg: &Segment, policy: InsertPolicy, metrics: &TableMetrics) -> u64 {
        let mut n = 0;
        for k in 0.. {
            let h = hash_u64(k);
            let mut kw = None;
            match seg.insert(h, &Key::Int(k), k, &mut kw, policy, &|| true, metrics).unwrap() {
                InsertStep::Inserted { .. } => n += 1,
                InsertStep::Full => break,
                other => panic!("{other:?}"),
            }
        }
        n
    }

    #[test]
    fn meta_round_trip() {
        let m = Meta { depth: 7, state: STATE_SPLITTING, redo: true, prefix: 0xDEAD };
        assert_eq!(Meta::unpack(m.pack()), m);
    }

    #[test]
    fn policies_order_peak_load_factor() {
        let metrics = TableMetrics::default();
        let mut peaks = Vec::new();
        for (policy, s) in [
            (InsertPolicy::BUCKETIZED, 0),
            (InsertPolicy::PROBING, 0),
            (InsertPolicy::BALANCED, 0),
            (InsertPolicy::STASH, 2),
        ] {
            let (pool, geo, base) = setup(64, s);
            let seg = Segment::new(&pool, base, geo);
            fill(&seg, policy, &metrics);
            peaks.push(seg.load_factor());
        }
        assert!(peaks.windows(2).all(|w| w[0] < w[1]), "{peaks:?}");
    }

    #[test]
    fn every_inserted_key_is_readable() {
        let metrics = TableMetrics::default();
        let (pool, geo, base) = setup(16, 2);
        let seg = Segment::new(&pool, base, geo);
        let n = fill(&seg, InsertPolicy::STASH, &metrics);
        assert!(metrics.displacements.load(std::sync::atomic::Ordering::Relaxed) > 0);
        assert!(metrics.stash_inserts.load(std::sync::atomic::Ordering::Relaxed) > 0);
        for k in 0..n {
            let mut probe = Probe::default();
            assert_eq!(seg.read(hash_u64(k), &Key::Int(k), &mut probe, &|| true, None), Probed::Found(k), "key {k}");
        }
        let mut probe = Probe::default();
        assert_eq!(seg.read(hash_u64(n + 10), &Key::Int(n + 10), &mut probe, &|| true, None), Probed::Absent);
    }

    /// Independent model of overflow placement: home entries first, then the
    /// probing bucket's entries, then the counter; encoded per the bit layout.
    fn overflow_oracle(seg: &Segment) -> Vec<u64> {
        let geo = seg.geo;
        let mut entries = vec![[None::<(bool, usize)>; 4]; geo.k];
        let mut count = vec![0u64; geo.k];
        let mut bit = vec![false; geo.k];
        for j in 0..geo.s {
            let sb = seg.stash(j);
            let pk = sb.packed();
            for slot in 0..SLOTS {
                if pk.alloc() & (1 << slot) == 0 {
                    continue;
                }
                let home = geo.home(hash_u64(sb.key_word(slot)));
                let probing = geo.next(home);
                bit[home] = true;
                if let Some(e) = entries[home].iter_mut().find(|e| e.is_none()) {
                    *e = Some((false, j));
                } else if let Some(e) = entries[probing].iter_mut().find(|e| e.is_none()) {
                    *e = Some((true, j));
                } else {
                    count[home] += 1;
                }
            }
        }
        (0..geo.k)
            .map(|i| {
                let mut w = (bit[i] as u64) << 4 | count[i] << 17;
                for (e, entry) in entries[i].iter().enumerate() {
                    if let Some((member, stash)) = entry {
                        w |= 1 << e;
                        w |= (*member as u64) << (5 + e);
                        w |= (*stash as u64) << (9 + 2 * e);
                    }
                }
                w
            })
            .collect()
    }

    #[test]
    fn rebuilt_overflow_metadata_matches_oracle() {
        let metrics = TableMetrics::default();
        for k in [4, 16, 64] {
            let (pool, geo, base) = setup(k, 4);
            let seg = Segment::new(&pool, base, geo);
            fill(&seg, InsertPolicy::STASH, &metrics);
            seg.rebuild_overflow();
            assert_eq!(seg.overflow_words(), overflow_oracle(&seg), "K={k}");
        }
    }

    #[test]
    fn dedup_removes_probing_copy() {
        let (pool, geo, base) = setup(16, 2);
        let seg = Segment::new(&pool, base, geo);
        seg.bucket(3).insert(77, 1, 0x42, false).unwrap();
        seg.bucket(4).insert(77, 1, 0x42, true).unwrap();
        seg.bucket(4).insert(78, 2, 0x42, true).unwrap();
        assert_eq!(seg.dedup().unwrap(), 1);
        assert_eq!(seg.bucket(3).packed().count(), 1);
        assert_eq!(seg.bucket(4).packed().count(), 1);
        assert_eq!(seg.bucket(4).key_word(1), 78);
    }

    #[test]
    fn remove_clears_stash_metadata() {
        let metrics = TableMetrics::default();
        let (pool, geo, base) = setup(16, 2);
        let seg = Segment::new(&pool, base, geo);
        let n = fill(&seg, InsertPolicy::STASH, &metrics);
        for k in 0..n {
            assert_eq!(seg.remove(hash_u64(k), &Key::Int(k), &|| true).unwrap(), RemoveStep::Removed);
        }
        assert_eq!(seg.record_count(), 0);
        assert!(seg.overflow_words().iter().all(|&w| w == 0), "{:x?}", seg.overflow_words());
    }
}
