//! Crash-safe block allocator living inside the pool.
//!
//! Blocks carry a 64-byte header (`size`, `link`, `kind`) and are handed out
//! as handles pointing just past it. Free blocks sit on per-size free lists;
//! retired blocks sit on a persistent limbo list until the epoch manager
//! releases them. Every multi-step mutation is described by a single
//! in-flight record that [`reconcile`] finishes or undoes when a pool is
//! opened.

use std::collections::{HashMap, HashSet};

use super::pool::{PersistentPool, LINE};
use crate::error::{Error, Result};

pub const ALLOC_STATE: u64 = 64;
const BUMP: u64 = ALLOC_STATE;
const LIMBO_HEAD: u64 = ALLOC_STATE + 8;
const HEAP_START_FIELD: u64 = ALLOC_STATE + 16;

const REC: u64 = ALLOC_STATE + 64;
const REC_OP: u64 = REC;
const REC_OWNER: u64 = REC + 8;
const REC_BLOCK: u64 = REC + 16;
const REC_AUX: u64 = REC + 24;
const REC_OLD: u64 = REC + 32;
const REC_FLAGS: u64 = REC + 40;
const REC_CLASS: u64 = REC + 48;

const FREE_TABLE: u64 = ALLOC_STATE + 128;
pub const MAX_CLASSES: u64 = 32;

pub const HEAP_START: u64 = 1024;
pub const BLOCK_HEADER: u64 = 64;

const OP_NONE: u64 = 0;
const OP_ALLOC: u64 = 1;
const OP_FREE: u64 = 2;
const OP_SWAP: u64 = 3;

const FLAG_RETIRE: u64 = 1;
const FLAG_FROM_FREE: u64 = 2;

const H_SIZE: u64 = 0;
const H_LINK: u64 = 8;
const H_KIND: u64 = 16;

pub const KIND_FREE: u64 = 0;
pub const KIND_OBJECT: u64 = 1;
pub const KIND_KEY: u64 = 2;

fn round_up(n: u64) -> u64 {
    n.div_ceil(LINE) * LINE
}

fn block_of(handle: u64) -> u64 {
    handle - BLOCK_HEADER
}

fn class_size(class: u64) -> u64 {
    FREE_TABLE + class * 16
}

fn class_head(class: u64) -> u64 {
    FREE_TABLE + class * 16 + 8
}

pub(crate) fn format(pool: &PersistentPool) -> Result<()> {
    pool.store_u64(BUMP, HEAP_START);
    pool.store_u64(HEAP_START_FIELD, HEAP_START);
    pool.flush(ALLOC_STATE, HEAP_START - ALLOC_STATE)?;
    Ok(())
}

pub(crate) fn check_extent(pool: &PersistentPool) -> Result<()> {
    let bump = pool.load_u64(BUMP);
    if pool.load_u64(HEAP_START_FIELD) != HEAP_START || bump < HEAP_START || bump > pool.capacity() {
        return Err(Error::Truncated(format!(
            "allocator frontier {bump} outside pool of {} bytes",
            pool.capacity()
        )));
    }
    Ok(())
}

/// Finishes or undoes whatever the in-flight record describes.
pub(crate) fn reconcile(pool: &PersistentPool) -> Result<()> {
    let op = pool.load_u64(REC_OP);
    let owner = pool.load_u64(REC_OWNER);
    let block = pool.load_u64(REC_BLOCK);
    let aux = pool.load_u64(REC_AUX);
    let old = pool.load_u64(REC_OLD);
    let flags = pool.load_u64(REC_FLAGS);
    let class = pool.load_u64(REC_CLASS);
    match op {
        OP_NONE => return Ok(()),
        OP_ALLOC => {
            if pool.load_u64(owner) == block + BLOCK_HEADER {
                if flags & FLAG_RETIRE != 0 && old != 0 {
                    limbo_push(pool, block_of(old))?;
                }
            } else if flags & FLAG_FROM_FREE != 0 {
                if pool.load_u64(class_head(class)) != block {
                    free_push(pool, block, class)?;
                }
            } else if pool.load_u64(BUMP) > block {
                pool.store_u64(BUMP, block);
                pool.persist(BUMP, 8)?;
            }
        }
        OP_FREE => {
            if limbo_contains(pool, block) {
                limbo_unlink(pool, block)?;
            }
            if pool.load_u64(class_head(class)) != block {
                free_push(pool, block, class)?;
            }
        }
        OP_SWAP => {
            pool.store_u64(owner, aux);
            pool.persist(owner, 8)?;
            limbo_push(pool, block)?;
        }
        other => {
            return Err(Error::InvalidConfig(format!("unknown allocator record op {other}")));
        }
    }
    clear_record(pool)
}

fn clear_record(pool: &PersistentPool) -> Result<()> {
    pool.store_u64(REC_OP, OP_NONE);
    pool.persist(REC_OP, 8)
}

fn write_record(pool: &PersistentPool, fields: [u64; 7]) -> Result<()> {
    for (i, v) in fields.iter().enumerate().skip(1) {
        pool.store_u64(REC + 8 * i as u64, *v);
    }
    pool.store_u64(REC_OP, fields[0]);
    pool.persist(REC, 64)
}

/// Pushes `block` onto the limbo list unless it is already the head.
fn limbo_push(pool: &PersistentPool, block: u64) -> Result<()> {
    let head = pool.load_u64(LIMBO_HEAD);
    if head == block {
        return Ok(());
    }
    pool.store_u64(block + H_LINK, head);
    pool.persist(block + H_LINK, 8)?;
    pool.store_u64(LIMBO_HEAD, block);
    pool.persist(LIMBO_HEAD, 8)
}

fn limbo_contains(pool: &PersistentPool, block: u64) -> bool {
    let mut cur = pool.load_u64(LIMBO_HEAD);
    while cur != 0 {
        if cur == block {
            return true;
        }
        cur = pool.load_u64(cur + H_LINK);
    }
    false
}

fn limbo_unlink(pool: &PersistentPool, block: u64) -> Result<()> {
    let next = pool.load_u64(block + H_LINK);
    let mut slot = LIMBO_HEAD;
    loop {
        let cur = pool.load_u64(slot);
        if cur == 0 {
            return Err(Error::NotRetired(block + BLOCK_HEADER));
        }
        if cur == block {
            pool.store_u64(slot, next);
            return pool.persist(slot, 8);
        }
        slot = cur + H_LINK;
    }
}

fn free_push(pool: &PersistentPool, block: u64, class: u64) -> Result<()> {
    pool.store_u64(block + H_LINK, pool.load_u64(class_head(class)));
    pool.store_u64(block + H_KIND, KIND_FREE);
    pool.persist(block, 64)?;
    pool.store_u64(class_head(class), block);
    pool.persist(class_head(class), 8)
}

fn find_class(pool: &PersistentPool, size: u64, claim: bool) -> Result<Option<u64>> {
    for class in 0..MAX_CLASSES {
        let s = pool.load_u64(class_size(class));
        if s == size {
            return Ok(Some(class));
        }
        if s == 0 {
            if !claim {
                return Ok(None);
            }
            pool.store_u64(class_size(class), size);
            pool.persist(class_size(class), 8)?;
            return Ok(Some(class));
        }
    }
    if claim {
        Err(Error::TooManySizeClasses)
    } else {
        Ok(None)
    }
}

impl PersistentPool {
    /// Allocates a zeroed block of at least `size` bytes, runs `init` on its
    /// handle, persists it and publishes the handle into `owner_slot`.
    ///
    /// With `retire_old`, the block previously referenced by `owner_slot`
    /// moves to the limbo list as part of the same logical step. A crash
    /// anywhere inside leaves the new block either published or back in free
    /// space.
    pub fn alloc_into<F>(&self, size: u64, owner_slot: u64, retire_old: bool, init: F) -> Result<u64>
    where
        F: FnOnce(u64) -> Result<()>,
    {
        let payload = round_up(size.max(8));
        let total = payload + BLOCK_HEADER;
        let _g = self.alloc_lock.lock();
        let old = self.load_u64(owner_slot);
        let class = find_class(self, total, false)?;
        let popped = class.map(|c| self.load_u64(class_head(c))).filter(|&b| b != 0);

        let mut flags = if retire_old { FLAG_RETIRE } else { 0 };
        let block = match popped {
            Some(block) => {
                flags |= FLAG_FROM_FREE;
                let class = class.unwrap();
                let next = self.load_u64(block + H_LINK);
                write_record(self, [OP_ALLOC, owner_slot, block, next, old, flags, class])?;
                self.store_u64(class_head(class), next);
                self.persist(class_head(class), 8)?;
                self.store_u64(block + H_LINK, 0);
                self.store_u64(block + H_KIND, KIND_OBJECT);
                self.persist(block, 64)?;
                block
            }
            None => {
                let block = self.load_u64(BUMP);
                if block + total > self.capacity() {
                    return Err(Error::OutOfSpace(total));
                }
                write_record(self, [OP_ALLOC, owner_slot, block, block, old, flags, 0])?;
                self.store_u64(block + H_SIZE, total);
                self.store_u64(block + H_LINK, 0);
                self.store_u64(block + H_KIND, KIND_OBJECT);
                self.persist(block, 64)?;
                self.store_u64(BUMP, block + total);
                self.persist(BUMP, 8)?;
                block
            }
        };

        let handle = block + BLOCK_HEADER;
        self.fill_zero(handle, payload)?;
        init(handle)?;
        self.flush(handle, payload)?;
        self.fence();

        self.store_u64(owner_slot, handle);
        self.persist(owner_slot, 8)?;
        if retire_old && old != 0 {
            limbo_push(self, block_of(old))?;
        }
        clear_record(self)?;
        Ok(handle)
    }

    /// Atomically replaces `owner_slot` with `new_value` and moves the block
    /// `retired` to the limbo list.
    pub fn swap_and_retire(&self, owner_slot: u64, new_value: u64, retired: u64) -> Result<()> {
        let _g = self.alloc_lock.lock();
        let block = block_of(retired);
        let old = self.load_u64(owner_slot);
        write_record(self, [OP_SWAP, owner_slot, block, new_value, old, 0, 0])?;
        self.store_u64(owner_slot, new_value);
        self.persist(owner_slot, 8)?;
        limbo_push(self, block)?;
        clear_record(self)
    }

    /// Moves a retired block from the limbo list onto its free list.
    pub fn free_retired(&self, handle: u64) -> Result<()> {
        let _g = self.alloc_lock.lock();
        let block = block_of(handle);
        if !limbo_contains(self, block) {
            return Err(Error::NotRetired(handle));
        }
        let size = self.load_u64(block + H_SIZE);
        let class = find_class(self, size, true)?.unwrap();
        write_record(self, [OP_FREE, 0, block, 0, 0, 0, class])?;
        limbo_unlink(self, block)?;
        free_push(self, block, class)?;
        clear_record(self)
    }

    /// Appends an immutable key record (`u32` length then bytes). Key records
    /// are never freed.
    pub fn alloc_key(&self, key: &[u8]) -> Result<u64> {
        let payload = round_up(4 + key.len() as u64);
        let total = payload + BLOCK_HEADER;
        let _g = self.alloc_lock.lock();
        let block = self.load_u64(BUMP);
        if block + total > self.capacity() {
            return Err(Error::OutOfSpace(total));
        }
        let handle = block + BLOCK_HEADER;
        self.store_u64(block + H_SIZE, total);
        self.store_u64(block + H_LINK, 0);
        self.store_u64(block + H_KIND, KIND_KEY);
        self.store_u32(handle, key.len() as u32);
        self.store_bytes(handle + 4, key)?;
        self.flush(block, total)?;
        self.fence();
        self.store_u64(BUMP, block + total);
        self.persist(BUMP, 8)?;
        Ok(handle)
    }

    pub fn key_len(&self, handle: u64) -> u32 {
        self.load_u32(handle)
    }

    pub fn key_bytes(&self, handle: u64) -> Vec<u8> {
        let mut out = vec![0u8; self.key_len(handle) as usize];
        // Key records are written before publication and never mutated.
        self.read_bytes(handle + 4, &mut out).expect("key record out of range");
        out
    }

    /// Handles currently on the limbo list, newest first.
    pub fn retired_handles(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut cur = self.load_u64(LIMBO_HEAD);
        while cur != 0 {
            out.push(cur + BLOCK_HEADER);
            cur = self.load_u64(cur + H_LINK);
        }
        out
    }

    /// Payload size of the block behind `handle`.
    pub fn block_size(&self, handle: u64) -> u64 {
        self.load_u64(block_of(handle) + H_SIZE) - BLOCK_HEADER
    }

    /// Walks the heap and free state; see [`HeapAudit`].
    pub fn audit_heap(&self) -> HeapAudit {
        let bump = self.load_u64(BUMP);
        let mut blocks = Vec::new();
        let mut cur = HEAP_START;
        while cur < bump {
            let size = self.load_u64(cur + H_SIZE);
            if size < BLOCK_HEADER || cur + size > bump {
                blocks.push(BlockInfo { handle: cur + BLOCK_HEADER, size: 0, kind: u64::MAX });
                break;
            }
            blocks.push(BlockInfo {
                handle: cur + BLOCK_HEADER,
                size,
                kind: self.load_u64(cur + H_KIND),
            });
            cur += size;
        }
        let mut free = Vec::new();
        for class in 0..MAX_CLASSES {
            let mut b = self.load_u64(class_head(class));
            let mut guard = 0;
            while b != 0 && guard <= blocks.len() {
                free.push(b + BLOCK_HEADER);
                b = self.load_u64(b + H_LINK);
                guard += 1;
            }
        }
        HeapAudit {
            heap_start: HEAP_START,
            bump,
            blocks,
            free,
            limbo: self.retired_handles(),
            in_flight: self.load_u64(REC_OP) != OP_NONE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub handle: u64,
    pub size: u64,
    pub kind: u64,
}

/// Snapshot of allocator ownership used to detect leaks and double
/// ownership.
#[derive(Debug, Clone)]
pub struct HeapAudit {
    pub heap_start: u64,
    pub bump: u64,
    pub blocks: Vec<BlockInfo>,
    pub free: Vec<u64>,
    pub limbo: Vec<u64>,
    pub in_flight: bool,
}

impl HeapAudit {
    /// Checks that every block is owned by exactly one of: a free list, the
    /// limbo list, the key-record area, or the caller's `reachable` set.
    /// Returns the list of violations (empty when the heap is consistent).
    pub fn violations(&self, reachable: &HashSet<u64>) -> Vec<String> {
        let mut out = Vec::new();
        if self.in_flight {
            out.push("allocator record still in flight".into());
        }
        let mut owners: HashMap<u64, Vec<&'static str>> = HashMap::new();
        for &h in &self.free {
            owners.entry(h).or_default().push("free");
        }
        for &h in &self.limbo {
            owners.entry(h).or_default().push("limbo");
        }
        for &h in reachable {
            owners.entry(h).or_default().push("reachable");
        }
        let mut walked = 0u64;
        for b in &self.blocks {
            if b.kind == u64::MAX {
                out.push(format!("corrupt block header at {}", b.handle));
                continue;
            }
            walked += b.size;
            let mut who = owners.remove(&b.handle).unwrap_or_default();
            if b.kind == KIND_KEY {
                who.push("key");
            }
            if who.len() != 1 {
                out.push(format!("block {} (size {}) owned by {:?}", b.handle, b.size, who));
            }
            if who == ["free"] && b.kind != KIND_FREE {
                out.push(format!("free block {} not marked free", b.handle));
            }
        }
        for (h, who) in owners {
            out.push(format!("{h} referenced by {who:?} but is not a heap block"));
        }
        if walked != self.bump - self.heap_start {
            out.push(format!(
                "walked {walked} bytes but heap spans {}",
                self.bump - self.heap_start
            ));
        }
        out
    }

    pub fn free_bytes(&self) -> u64 {
        let sizes: HashMap<u64, u64> = self.blocks.iter().map(|b| (b.handle, b.size)).collect();
        self.free.iter().map(|h| sizes.get(h).copied().unwrap_or(0)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::pool::{CrashPolicy, PoolMode, HDR_ROOT, MIN_CAPACITY};

    fn sim() -> PersistentPool {
        PersistentPool::in_memory(MIN_CAPACITY, PoolMode::CrashSim).unwrap()
    }

    fn owned(handles: &[u64]) -> HashSet<u64> {
        handles.iter().copied().filter(|&h| h != 0).collect()
    }

    #[test]
    fn alloc_publishes_initialized_block() {
        let pool = sim();
        let h = pool
            .alloc_into(16 * 1024, HDR_ROOT, false, |h| {
                pool.store_u64(h + 8, 42);
                Ok(())
            })
            .unwrap();
        assert_eq!(pool.load_u64(HDR_ROOT), h);
        assert_eq!(pool.load_u64(h), 0);
        assert_eq!(pool.load_u64(h + 8), 42);
        let after = pool.crash(CrashPolicy::Strict).unwrap();
        assert_eq!(after.load_u64(HDR_ROOT), h);
        assert_eq!(after.load_u64(h + 8), 42);
        assert!(after.audit_heap().violations(&owned(&[h])).is_empty());
    }

    #[test]
    fn sequential_allocs_do_not_overlap() {
        let pool = sim();
        let a = pool.alloc_into(1000, 4096, false, |_| Ok(())).unwrap();
        let b = pool.alloc_into(1000, 4104, false, |_| Ok(())).unwrap();
        let sa = pool.block_size(a);
        assert!(a + sa <= b - BLOCK_HEADER || b + pool.block_size(b) <= a - BLOCK_HEADER);
    }

    #[test]
    fn out_of_space() {
        let pool = sim();
        let err = pool.alloc_into(MIN_CAPACITY, HDR_ROOT, false, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::OutOfSpace(_)));
        assert_eq!(pool.load_u64(HDR_ROOT), 0);
    }

    #[test]
    fn retired_block_is_reused_after_free() {
        let pool = sim();
        let a = pool.alloc_into(512, HDR_ROOT, false, |_| Ok(())).unwrap();
        let b = pool.alloc_into(512, HDR_ROOT, true, |_| Ok(())).unwrap();
        assert_eq!(pool.retired_handles(), vec![a]);
        assert!(pool.audit_heap().violations(&owned(&[b])).is_empty());
        pool.free_retired(a).unwrap();
        assert!(pool.retired_handles().is_empty());
        let c = pool.alloc_into(512, HDR_ROOT, true, |_| Ok(())).unwrap();
        assert_eq!(c, a);
        assert_eq!(pool.retired_handles(), vec![b]);
        assert!(pool.audit_heap().violations(&owned(&[c])).is_empty());
    }

    #[test]
    fn freeing_a_live_block_is_rejected() {
        let pool = sim();
        let a = pool.alloc_into(512, HDR_ROOT, false, |_| Ok(())).unwrap();
        assert!(matches!(pool.free_retired(a), Err(Error::NotRetired(_))));
    }

    #[test]
    fn key_records_round_trip() {
        let pool = sim();
        let h = pool.alloc_key(b"hello, pool").unwrap();
        assert_eq!(pool.key_len(h), 11);
        assert_eq!(pool.key_bytes(h), b"hello, pool");
        assert!(pool.audit_heap().violations(&HashSet::new()).is_empty());
    }

    /// Runs `op` on a fork of `base` with a crash armed at every persistence
    /// op index, handing each post-crash pool to `check`.
    fn sweep(
        base: &PersistentPool,
        op: impl Fn(&PersistentPool),
        check: impl Fn(u64, &PersistentPool),
    ) -> u64 {
        let probe = base.fork();
        let before = probe.stats();
        op(&probe);
        let total = probe.stats().since(&before).ops();
        for i in 0..=total {
            let pool = base.fork();
            pool.arm_crash(i);
            op(&pool);
            let after = pool.crash(CrashPolicy::Strict).unwrap();
            check(i, &after);
        }
        total
    }

    #[test]
    fn alloc_crash_sweep_from_bump() {
        let base = sim();
        let ops = sweep(
            &base,
            |p| {
                p.alloc_into(4096, HDR_ROOT, false, |h| {
                    p.store_u64(h, 7);
                    Ok(())
                })
                .unwrap();
            },
            |i, p| {
                let root = p.load_u64(HDR_ROOT);
                let audit = p.audit_heap();
                assert!(audit.violations(&owned(&[root])).is_empty(), "point {i}: {:?}", audit.violations(&owned(&[root])));
                if root == 0 {
                    assert_eq!(audit.bump, HEAP_START, "point {i}: bump not rewound");
                } else {
                    assert_eq!(p.load_u64(root), 7, "point {i}: published but uninitialized");
                }
            },
        );
        assert!(ops > 8);
    }

    #[test]
    fn alloc_crash_sweep_from_free_list_with_retire() {
        let base = sim();
        let a = base.alloc_into(2048, HDR_ROOT, false, |_| Ok(())).unwrap();
        let b = base.alloc_into(2048, HDR_ROOT, true, |_| Ok(())).unwrap();
        base.free_retired(a).unwrap();
        let total_before = base.audit_heap().bump;
        sweep(
            &base,
            |p| {
                p.alloc_into(2048, HDR_ROOT, true, |h| {
                    p.store_u64(h, 9);
                    Ok(())
                })
                .unwrap();
            },
            |i, p| {
                let root = p.load_u64(HDR_ROOT);
                let audit = p.audit_heap();
                let v = audit.violations(&owned(&[root]));
                assert!(v.is_empty(), "point {i}: {v:?}");
                assert_eq!(audit.bump, total_before);
                if root == b {
                    assert_eq!(audit.free, vec![a]);
                    assert!(audit.limbo.is_empty());
                } else {
                    assert_eq!(root, a, "point {i}");
                    assert_eq!(p.load_u64(a), 9);
                    assert_eq!(audit.limbo, vec![b]);
                }
            },
        );
    }

    #[test]
    fn free_crash_sweep() {
        let base = sim();
        let a = base.alloc_into(256, HDR_ROOT, false, |_| Ok(())).unwrap();
        let b = base.alloc_into(256, HDR_ROOT, true, |_| Ok(())).unwrap();
        let c = base.alloc_into(256, HDR_ROOT, true, |_| Ok(())).unwrap();
        assert_eq!(base.retired_handles(), vec![b, a]);
        sweep(
            &base,
            |p| p.free_retired(a).unwrap(),
            |i, p| {
                let audit = p.audit_heap();
                let v = audit.violations(&owned(&[c]));
                assert!(v.is_empty(), "point {i}: {v:?}");
                assert!(audit.limbo.contains(&b));
            },
        );
    }

    #[test]
    fn swap_and_retire_crash_sweep() {
        let base = sim();
        let a = base.alloc_into(256, 4096, false, |_| Ok(())).unwrap();
        sweep(
            &base,
            |p| p.swap_and_retire(4096, 0, a).unwrap(),
            |i, p| {
                let slot = p.load_u64(4096);
                let v = p.audit_heap().violations(&owned(&[slot]));
                assert!(v.is_empty(), "point {i}: {v:?}");
            },
        );
    }
}
