//! Epoch-based reclamation.
//!
//! Threads bracket every table operation with [`EpochManager::enter`]. An
//! item retired while the global epoch is `e` is released once the global
//! epoch reaches `e + 2`, which can only happen after every thread pinned at
//! `e` or earlier has left.

use std::cell::Cell;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

const SLOTS: usize = 256;
const DRAIN_EVERY: u64 = 1024;

#[repr(align(64))]
#[derive(Default)]
struct Slot {
    /// 0 when idle, otherwise `(epoch << 1) | 1`.
    state: AtomicU64,
}

thread_local! {
    static HINT: Cell<usize> = const { Cell::new(usize::MAX) };
}

pub struct EpochManager<T: Send> {
    global: AtomicU64,
    slots: Box<[Slot]>,
    retired: Mutex<VecDeque<(u64, T)>>,
    release: Box<dyn Fn(T) + Send + Sync>,
    enters: AtomicU64,
    freed: AtomicU64,
}

pub struct Guard<'a, T: Send> {
    mgr: &'a EpochManager<T>,
    slot: usize,
}

impl<T: Send> Drop for Guard<'_, T> {
    fn drop(&mut self) {
        self.mgr.slots[self.slot].state.store(0, Ordering::Release);
    }
}

impl<T: Send> Guard<'_, T> {
    pub fn epoch(&self) -> u64 {
        self.mgr.slots[self.slot].state.load(Ordering::Relaxed) >> 1
    }
}

impl<T: Send> EpochManager<T> {
    pub fn new(release: impl Fn(T) + Send + Sync + 'static) -> Self {
        EpochManager {
            global: AtomicU64::new(0),
            slots: (0..SLOTS).map(|_| Slot::default()).collect(),
            retired: Mutex::new(VecDeque::new()),
            release: Box::new(release),
            enters: AtomicU64::new(0),
            freed: AtomicU64::new(0),
        }
    }

    pub fn global_epoch(&self) -> u64 {
        self.global.load(Ordering::SeqCst)
    }

    pub fn enter(&self) -> Guard<'_, T> {
        if self.enters.fetch_add(1, Ordering::Relaxed) % DRAIN_EVERY == DRAIN_EVERY - 1 {
            self.try_advance_and_drain();
        }
        let start = HINT.with(|h| h.get());
        let start = if start == usize::MAX { thread_index() % SLOTS } else { start };
        let mut i = start;
        loop {
            let slot = &self.slots[i];
            let e = self.global.load(Ordering::SeqCst);
            if slot
                .state
                .compare_exchange(0, (e << 1) | 1, Ordering::SeqCst, Ordering::Relaxed)
                .is_ok()
            {
                // Re-pin until the published epoch is current.
                let mut pinned = e;
                loop {
                    let now = self.global.load(Ordering::SeqCst);
                    if now == pinned {
                        break;
                    }
                    slot.state.store((now << 1) | 1, Ordering::SeqCst);
                    pinned = now;
                }
                HINT.with(|h| h.set(i));
                return Guard { mgr: self, slot: i };
            }
            i = (i + 1) % SLOTS;
            if i == start {
                std::thread::yield_now();
            }
        }
    }

    pub fn retire(&self, item: T) {
        let e = self.global.load(Ordering::SeqCst);
        self.retired.lock().push_back((e, item));
    }

    pub fn pending(&self) -> usize {
        self.retired.lock().len()
    }

    pub fn freed_total(&self) -> u64 {
        self.freed.load(Ordering::Relaxed)
    }

    /// Advances the global epoch if every active thread has caught up, then
    /// releases whatever is two epochs behind. Returns the number released.
    pub fn try_advance_and_drain(&self) -> usize {
        let e = self.global.load(Ordering::SeqCst);
        let lagging = self.slots.iter().any(|s| {
            let st = s.state.load(Ordering::SeqCst);
            st & 1 == 1 && (st >> 1) != e
        });
        if !lagging {
            let _ = self.global.compare_exchange(e, e + 1, Ordering::SeqCst, Ordering::SeqCst);
        }
        let now = self.global.load(Ordering::SeqCst);
        let ready: Vec<T> = {
            let mut q = self.retired.lock();
            let mut out = Vec::new();
            while q.front().is_some_and(|(r, _)| r + 2 <= now) {
                out.push(q.pop_front().unwrap().1);
            }
            out
        };
        let n = ready.len();
        for item in ready {
            (self.release)(item);
        }
        self.freed.fetch_add(n as u64, Ordering::Relaxed);
        n
    }
}

fn thread_index() -> usize {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    std::thread::current().id().hash(&mut h);
    h.finish() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    #[test]
    fn quiescent_retire_frees_after_two_advances() {
        let freed = Arc::new(AtomicUsize::new(0));
        let f = freed.clone();
        let mgr = EpochManager::new(move |_: u32| {
            f.fetch_add(1, Ordering::SeqCst);
        });
        mgr.retire(1);
        assert_eq!(mgr.try_advance_and_drain(), 0);
        assert_eq!(mgr.try_advance_and_drain(), 1);
        assert_eq!(freed.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn pinned_reader_blocks_release() {
        let mgr = EpochManager::new(|_: u32| {});
        let g = mgr.enter();
        mgr.retire(7);
        for _ in 0..10 {
            assert_eq!(mgr.try_advance_and_drain(), 0);
        }
        assert_eq!(mgr.pending(), 1);
        drop(g);
        let mut n = 0;
        for _ in 0..3 {
            n += mgr.try_advance_and_drain();
        }
        assert_eq!(n, 1);
    }

    #[test]
    fn liveness_drains_everything_when_idle() {
        let mgr = EpochManager::new(|_: u32| {});
        for i in 0..100 {
            let _g = mgr.enter();
            mgr.retire(i);
        }
        for _ in 0..4 {
            mgr.try_advance_and_drain();
        }
        assert_eq!(mgr.pending(), 0);
        assert_eq!(mgr.freed_total(), 100);
    }

    #[test]
    fn drain_is_piggybacked_on_enter() {
        let mgr = EpochManager::new(|_: u32| {});
        mgr.retire(0);
        for _ in 0..3 * DRAIN_EVERY {
            drop(mgr.enter());
        }
        assert_eq!(mgr.pending(), 0);
    }
}
