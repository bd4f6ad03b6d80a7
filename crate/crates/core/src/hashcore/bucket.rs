//! The 256-byte bucket.
//!
//! ```text
//! bytes 0..4    version lock
//! bytes 4..8    packed: alloc bits 0..14 | membership bits 14..28 | counter bits 28..32
//! bytes 8..26   fingerprints: 14 slot fingerprints then 4 overflow fingerprints
//! bytes 26..32  overflow word (48 bits):
//!                 fp bitmap 0..4 | overflow bit 4 | membership 5..9 |
//!                 stash index 2 bits per entry at 9 + 2i | count 17..25
//! bytes 32..256 14 slots of (key word, value word)
//! ```

use super::key::{key_matches, Key, Probe};
use super::lock::VersionLock;
use crate::error::{Error, Result};
use crate::persist::PersistentPool;

pub const BUCKET_SIZE: u64 = 256;
pub const SLOTS: usize = 14;
pub const OVERFLOW_SLOTS: usize = 4;

const LOCK_OFF: u64 = 0;
const PACKED_OFF: u64 = 4;
const FP_OFF: u64 = 8;
const OVF_WORD_OFF: u64 = 24;
const OVF_OFF: u64 = 26;
const SLOT_OFF: u64 = 32;
const SLOT_SIZE: u64 = 16;

const SLOT_MASK: u32 = (1 << SLOTS) - 1;
const COUNT_SATURATED: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Packed(pub u32);

impl Packed {
    #[inline]
    pub fn alloc(self) -> u32 {
        self.0 & SLOT_MASK
    }

    #[inline]
    pub fn membership(self) -> u32 {
        (self.0 >> SLOTS) & SLOT_MASK
    }

    #[inline]
    pub fn count(self) -> u32 {
        self.0 >> 28
    }

    #[inline]
    pub fn is_full(self) -> bool {
        self.alloc() == SLOT_MASK
    }

    pub fn compose(alloc: u32, membership: u32) -> Packed {
        Packed(alloc | (membership << SLOTS) | (alloc.count_ones() << 28))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overflow(pub u64);

impl Overflow {
    #[inline]
    pub fn fp_bitmap(self) -> u32 {
        (self.0 & 0xF) as u32
    }

    #[inline]
    pub fn bit(self) -> bool {
        self.0 & (1 << 4) != 0
    }

    #[inline]
    pub fn membership(self) -> u32 {
        ((self.0 >> 5) & 0xF) as u32
    }

    #[inline]
    pub fn stash_index(self, i: usize) -> usize {
        ((self.0 >> (9 + 2 * i)) & 0x3) as usize
    }

    #[inline]
    pub fn count(self) -> u8 {
        ((self.0 >> 17) & 0xFF) as u8
    }

    fn with_bit(self, on: bool) -> Self {
        Overflow((self.0 & !(1 << 4)) | ((on as u64) << 4))
    }

    fn with_entry(self, i: usize, member: bool, stash: usize) -> Self {
        let mut v = self.0 | (1 << i);
        v = (v & !(1 << (5 + i))) | ((member as u64) << (5 + i));
        v = (v & !(0x3 << (9 + 2 * i))) | (((stash & 0x3) as u64) << (9 + 2 * i));
        Overflow(v)
    }

    fn without_entry(self, i: usize) -> Self {
        Overflow(self.0 & !(1 << i) & !(1 << (5 + i)) & !(0x3 << (9 + 2 * i)))
    }

    fn with_count(self, c: u8) -> Self {
        Overflow((self.0 & !(0xFF << 17)) | ((c as u64) << 17))
    }

    /// Entries owned by this bucket (membership clear).
    #[inline]
    pub fn own_entries(self) -> u32 {
        self.fp_bitmap() & !self.membership()
    }

    /// Entries held on behalf of the left neighbour (membership set).
    #[inline]
    pub fn borrowed_entries(self) -> u32 {
        self.fp_bitmap() & self.membership()
    }
}

/// View of one bucket in the pool.
#[derive(Clone, Copy)]
pub struct Bucket<'a> {
    pub pool: &'a PersistentPool,
    pub off: u64,
}

impl<'a> Bucket<'a> {
    pub fn new(pool: &'a PersistentPool, off: u64) -> Self {
        debug_assert!(off.is_multiple_of(64), "bucket at {off} is not line aligned");
        Bucket { pool, off }
    }

    #[inline]
    pub fn lock(&self) -> VersionLock<'a> {
        VersionLock::new(self.pool, self.off + LOCK_OFF)
    }

    #[inline]
    pub fn packed(&self) -> Packed {
        Packed(self.pool.load_u32(self.off + PACKED_OFF))
    }

    #[inline]
    pub fn overflow(&self) -> Overflow {
        Overflow(self.pool.load_u64(self.off + OVF_WORD_OFF) >> 16)
    }

    #[inline]
    pub fn fp(&self, i: usize) -> u8 {
        self.pool.load_u8(self.off + FP_OFF + i as u64)
    }

    #[inline]
    pub fn key_word(&self, slot: usize) -> u64 {
        self.pool.load_u64(self.slot_off(slot))
    }

    #[inline]
    pub fn value(&self, slot: usize) -> u64 {
        self.pool.load_u64(self.slot_off(slot) + 8)
    }

    #[inline]
    fn slot_off(&self, slot: usize) -> u64 {
        self.off + SLOT_OFF + slot as u64 * SLOT_SIZE
    }

    /// Slots whose alloc bit is set and whose fingerprint equals `fp`.
    #[inline]
    pub fn matching(&self, fp: u8) -> u32 {
        let mut alloc = self.packed().alloc();
        let mut out = 0;
        while alloc != 0 {
            let i = alloc.trailing_zeros() as usize;
            alloc &= alloc - 1;
            if self.fp(i) == fp {
                out |= 1 << i;
            }
        }
        out
    }

    /// Looks `key` up among the allocated slots with a matching fingerprint.
    pub fn search(&self, key: &Key, fp: u8, probe: &mut Probe) -> Option<(usize, u64)> {
        let mut cand = self.matching(fp);
        while cand != 0 {
            let i = cand.trailing_zeros() as usize;
            cand &= cand - 1;
            let word = self.key_word(i);
            let value = self.value(i);
            if key_matches(self.pool, word, key, probe) {
                return Some((i, value));
            }
        }
        None
    }

    /// Writes a record into the lowest free slot. The record is persisted
    /// before the metadata that makes it visible. Caller holds the lock.
    pub fn insert(&self, key_word: u64, value: u64, fp: u8, member: bool) -> Result<usize> {
        let p = self.packed();
        if p.is_full() {
            return Err(Error::BucketFull);
        }
        let slot = (!p.alloc() & SLOT_MASK).trailing_zeros() as usize;
        let so = self.slot_off(slot);
        self.pool.store_u64(so, key_word);
        self.pool.store_u64(so + 8, value);
        self.pool.flush(so, SLOT_SIZE)?;
        self.pool.fence();
        self.pool.store_u8(self.off + FP_OFF + slot as u64, fp);
        let membership = if member { p.membership() | (1 << slot) } else { p.membership() };
        let next = Packed::compose(p.alloc() | (1 << slot), membership);
        self.pool.store_u32(self.off + PACKED_OFF, next.0);
        self.pool.flush(self.off, 64)?;
        self.pool.fence();
        Ok(slot)
    }

    /// Clears a slot's alloc and membership bits. Caller holds the lock.
    pub fn delete_slot(&self, slot: usize) -> Result<()> {
        let p = self.packed();
        debug_assert!(p.alloc() & (1 << slot) != 0);
        let next = Packed::compose(p.alloc() & !(1 << slot), p.membership() & !(1 << slot));
        self.pool.store_u32(self.off + PACKED_OFF, next.0);
        self.pool.flush(self.off, 64)?;
        self.pool.fence();
        Ok(())
    }

    /// Deletes `key` if present. Caller holds the lock.
    pub fn delete(&self, key: &Key, fp: u8, probe: &mut Probe) -> Result<bool> {
        match self.search(key, fp, probe) {
            Some((slot, _)) => {
                self.delete_slot(slot)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Lowest-index allocated slot with the requested membership.
    pub fn first_with_membership(&self, member: bool) -> Option<usize> {
        let p = self.packed();
        let bits = if member { p.alloc() & p.membership() } else { p.alloc() & !p.membership() };
        (bits != 0).then(|| bits.trailing_zeros() as usize)
    }

    // ---- overflow metadata (volatile by design; rebuilt on recovery) ----

    pub(crate) fn store_overflow(&self, o: Overflow) {
        self.pool.store_masked(
            self.off + OVF_WORD_OFF,
            0xFFFF_FFFF_FFFF_0000,
            o.0 << 16,
            self.off + OVF_OFF,
            6,
        );
    }

    fn set_overflow_fp(&self, i: usize, fp: u8) {
        self.pool.store_u8(self.off + FP_OFF + (SLOTS + i) as u64, fp);
    }

    pub fn overflow_fp(&self, i: usize) -> u8 {
        self.fp(SLOTS + i)
    }

    /// Stash buckets to probe for `fp` based on this bucket's own overflow
    /// entries (`borrowed == false`) or the ones held for its left neighbour.
    pub fn overflow_hits(&self, o: Overflow, fp: u8, borrowed: bool) -> u32 {
        let mut entries = if borrowed { o.borrowed_entries() } else { o.own_entries() };
        let mut stashes = 0;
        while entries != 0 {
            let i = entries.trailing_zeros() as usize;
            entries &= entries - 1;
            if self.overflow_fp(i) == fp {
                stashes |= 1 << o.stash_index(i);
            }
        }
        stashes
    }

    /// Resets all overflow metadata.
    pub fn reset_overflow(&self) {
        if self.overflow() != Overflow::default() {
            self.store_overflow(Overflow::default());
        }
    }
}

/// Records that a record whose target bucket is `home` lives in stash bucket
/// `stash` (or, with `None`, somewhere only a full scan finds). Both `home`
/// and `probing` must be locked.
pub fn set_overflow_meta(home: &Bucket, probing: &Bucket, fp: u8, stash: Option<usize>) {
    let ho = home.overflow();
    if let Some(stash) = stash {
        if let Some(i) = free_entry(ho) {
            home.set_overflow_fp(i, fp);
            home.store_overflow(ho.with_entry(i, false, stash).with_bit(true));
            return;
        }
        let po = probing.overflow();
        if probing.off != home.off {
            if let Some(i) = free_entry(po) {
                probing.set_overflow_fp(i, fp);
                probing.store_overflow(po.with_entry(i, true, stash));
                home.store_overflow(ho.with_bit(true));
                return;
            }
        }
    }
    let c = ho.count();
    let c = if c == COUNT_SATURATED { c } else { c + 1 };
    home.store_overflow(ho.with_count(c).with_bit(true));
}

/// Undoes one [`set_overflow_meta`] for a record with fingerprint `fp` that
/// lived in `stash`.
pub fn clear_overflow_meta(home: &Bucket, probing: &Bucket, fp: u8, stash: Option<usize>) {
    let mut ho = home.overflow();
    let mut done = false;
    if let Some(stash) = stash {
        if let Some(i) = find_entry(home, ho.own_entries(), ho, fp, stash) {
            ho = ho.without_entry(i);
            done = true;
        } else if probing.off != home.off {
            let po = probing.overflow();
            if let Some(i) = find_entry(probing, po.borrowed_entries(), po, fp, stash) {
                probing.store_overflow(po.without_entry(i));
                done = true;
            }
        }
    }
    if !done {
        let c = ho.count();
        // A saturated count no longer tracks exact membership; keep it so
        // searches continue to scan.
        if c > 0 && c < COUNT_SATURATED {
            ho = ho.with_count(c - 1);
        }
    }
    let still = ho.own_entries() != 0
        || ho.count() > 0
        || (probing.off != home.off && probing.overflow().borrowed_entries() != 0);
    home.store_overflow(ho.with_bit(still));
}

fn free_entry(o: Overflow) -> Option<usize> {
    let free = !o.fp_bitmap() & 0xF;
    (free != 0).then(|| free.trailing_zeros() as usize)
}

fn find_entry(b: &Bucket, mut entries: u32, o: Overflow, fp: u8, stash: usize) -> Option<usize> {
    while entries != 0 {
        let i = entries.trailing_zeros() as usize;
        entries &= entries - 1;
        if b.overflow_fp(i) == fp && o.stash_index(i) == stash {
            return Some(i);
        }
    }
    None
}
