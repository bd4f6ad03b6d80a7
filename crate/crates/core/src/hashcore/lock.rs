//! 32-bit optimistic version lock stored in the pool.
//!
//! Bit 0 is the lock bit and bits 1..32 hold the version. Releasing adds one
//! to a locked word, which clears the lock bit and bumps the version in a
//! single store.

use crate::persist::PersistentPool;

pub const LOCK_BIT: u32 = 1;

#[inline]
pub fn is_locked(word: u32) -> bool {
    word & LOCK_BIT != 0
}

/// Version number carried by a lock word.
#[inline]
pub fn version_of(word: u32) -> u32 {
    word >> 1
}

#[derive(Clone, Copy)]
pub struct VersionLock<'a> {
    pool: &'a PersistentPool,
    off: u64,
}

impl<'a> VersionLock<'a> {
    pub fn new(pool: &'a PersistentPool, off: u64) -> Self {
        VersionLock { pool, off }
    }

    #[inline]
    pub fn read(&self) -> u32 {
        self.pool.load_u32(self.off)
    }

    pub fn try_lock(&self) -> bool {
        let w = self.read();
        !is_locked(w) && self.pool.cas_u32(self.off, w, w | LOCK_BIT).is_ok()
    }

    pub fn lock(&self) {
        let mut spins = 0u32;
        loop {
            let w = self.read();
            if !is_locked(w) && self.pool.cas_u32(self.off, w, w | LOCK_BIT).is_ok() {
                return;
            }
            spins += 1;
            if spins.is_multiple_of(64) {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }

    #[inline]
    pub fn unlock(&self) {
        let w = self.read();
        debug_assert!(is_locked(w), "unlock of an unlocked bucket at {}", self.off);
        self.pool.store_u32(self.off, w.wrapping_add(1));
    }

    /// True iff `snapshot` was taken unlocked and nothing changed since.
    #[inline]
    pub fn verify(&self, snapshot: u32) -> bool {
        !is_locked(snapshot) && self.read() == snapshot
    }

    /// Drops a lock bit left behind by a crash.
    pub fn clear(&self) {
        let w = self.read();
        if is_locked(w) {
            self.pool.store_u32(self.off, w & !LOCK_BIT);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist::{PoolMode, MIN_CAPACITY};

    #[test]
    fn lock_unlock_bumps_version_by_one() {
        let pool = PersistentPool::in_memory(MIN_CAPACITY, PoolMode::CrashSim).unwrap();
        let l = VersionLock::new(&pool, 4096);
        let v0 = l.read();
        l.lock();
        assert!(is_locked(l.read()));
        l.unlock();
        assert_eq!(version_of(l.read()), version_of(v0) + 1);
        assert!(!is_locked(l.read()));
    }

    #[test]
    fn verify_rules() {
        let pool = PersistentPool::in_memory(MIN_CAPACITY, PoolMode::CrashSim).unwrap();
        let l = VersionLock::new(&pool, 4096);
        let clean = l.read();
        assert!(l.verify(clean));
        l.lock();
        let held = l.read();
        assert!(!l.verify(held));
        assert!(!l.try_lock());
        l.unlock();
        assert!(!l.verify(clean));
        assert!(l.try_lock());
        l.clear();
        assert!(!is_locked(l.read()));
    }
}
