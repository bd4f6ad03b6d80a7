use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use dash_core::eh::{DashEh, EhConfig};
use dash_core::hashcore::Key;
use dash_core::lh::{DashLh, LhConfig};
use dash_core::persist::{PersistentPool, PoolMode, MIN_CAPACITY};
use dash_core::table::{HashIndex, InsertOutcome};

fn pool(mib: u64) -> Arc<PersistentPool> {
    Arc::new(PersistentPool::in_memory(mib * MIN_CAPACITY, PoolMode::Direct).unwrap())
}

fn tables() -> Vec<(&'static str, Arc<dyn HashIndex>)> {
    let eh = DashEh::create(pool(256), EhConfig { buckets: 16, ..Default::default() }).unwrap();
    let lh = DashLh::create(pool(256), LhConfig { buckets: 16, base_segments: 4, stride: 4, ..Default::default() }).unwrap();
    vec![("eh", Arc::new(eh)), ("lh", Arc::new(lh))]
}

#[test]
fn disjoint_parallel_inserts_are_all_retrievable() {
    for (name, t) in tables() {
        let per = 25_000u64;
        thread::scope(|s| {
            for tid in 0..8u64 {
                let t = t.clone();
                s.spawn(move || {
                    for i in 0..per {
                        let k = tid * per + i;
                        assert_eq!(t.insert(Key::Int(k), !k).unwrap(), InsertOutcome::Inserted);
                    }
                });
            }
        });
        for k in 0..8 * per {
            assert_eq!(t.search(Key::Int(k)).unwrap(), Some(!k), "{name}: key {k}");
        }
        assert_eq!(t.check_structure(), Vec::<String>::new(), "{name}");
        assert_eq!(t.scan().len() as u64, 8 * per, "{name}");
    }
}

#[test]
fn readers_never_miss_acknowledged_inserts() {
    for (name, t) in tables() {
        let stable = 20_000u64;
        for k in 0..stable {
            t.insert(Key::Int(k), k).unwrap();
        }
        let stop = AtomicBool::new(false);
        let acked: Vec<AtomicU64> = (0..4).map(|_| AtomicU64::new(0)).collect();
        let reads = AtomicUsize::new(0);
        thread::scope(|s| {
            for w in 0..4u64 {
                let (t, stop, acked) = (&t, &stop, &acked);
                s.spawn(move || {
                    let mut i = 0;
                    while !stop.load(Ordering::Relaxed) {
                        let k = (1 << 32) + w * (1 << 28) + i;
                        t.insert(Key::Int(k), k).unwrap();
                        acked[w as usize].store(i + 1, Ordering::Release);
                        if i % 3 == 0 {
                            assert!(t.remove(Key::Int(k)).unwrap());
                            t.insert(Key::Int(k), k).unwrap();
                        }
                        i += 1;
                    }
                });
            }
            for r in 0..4u64 {
                let (t, stop, acked, reads) = (&t, &stop, &acked, &reads);
                s.spawn(move || {
                    let mut x = r;
                    while !stop.load(Ordering::Relaxed) {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        let k = (x >> 20) % stable;
                        assert_eq!(t.search(Key::Int(k)).unwrap(), Some(k), "stable key {k}");
                        let w = (x >> 8) % 4;
                        let n = acked[w as usize].load(Ordering::Acquire);
                        if n > 0 {
                            // Keys divisible by 3 are briefly removed and re-added.
                            let i = (x >> 40) % n;
                            let k = (1 << 32) + w * (1 << 28) + i;
                            if i % 3 != 0 {
                                assert_eq!(t.search(Key::Int(k)).unwrap(), Some(k), "acked key {k}");
                            }
                        }
                        reads.fetch_add(1, Ordering::Relaxed);
                    }
                });
            }
            thread::sleep(Duration::from_secs(2));
            stop.store(true, Ordering::Relaxed);
        });
        for (w, a) in acked.iter().enumerate() {
            let n = a.load(Ordering::Relaxed);
            for i in 0..n {
                let k = (1 << 32) + w as u64 * (1 << 28) + i;
                assert_eq!(t.search(Key::Int(k)).unwrap(), Some(k), "{name}: writer {w} key {i}");
            }
        }
        assert!(reads.load(Ordering::Relaxed) > 0);
        assert_eq!(t.check_structure(), Vec::<String>::new(), "{name}");
    }
}

#[test]
fn racing_advances_never_skip_a_slot() {
    let t = DashLh::create(pool(64), LhConfig { buckets: 4, stash: 1, base_segments: 4, stride: 2, ..Default::default() }).unwrap();
    let per = 50;
    let history = Mutex::new(Vec::new());
    let barrier = Barrier::new(8);
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                barrier.wait();
                for _ in 0..per {
                    t.advance_next().unwrap();
                    history.lock().unwrap().push(t.addressable());
                }
            });
        }
    });
    // 4 base segments plus one per advance.
    assert_eq!(t.addressable(), 4 + 8 * per);
    assert_eq!(t.metrics().next_advances, 8 * per);
    let seen: HashSet<u64> = history.into_inner().unwrap().into_iter().collect();
    assert!(seen.iter().all(|&c| (5..=4 + 8 * per).contains(&c)));
    assert_eq!(t.check_structure(), Vec::<String>::new());
}

/// A reader paused between reading a bucket and verifying it must retry
/// when a writer changes that bucket in the meantime.
fn reader_retries_after_concurrent_write(t: Arc<dyn HashIndex>, set_hook: impl Fn(Option<dash_core::table::ReadHook>)) {
    t.insert(Key::Int(1), 10).unwrap();
    let (to_writer, writer_rx) = mpsc::channel::<()>();
    let (to_reader, reader_rx) = mpsc::channel::<()>();
    let reader_rx = Mutex::new(reader_rx);
    let first = AtomicBool::new(true);
    let first = Arc::new(first);
    let f = first.clone();
    let to_writer = Mutex::new(to_writer);
    set_hook(Some(Arc::new(move || {
        if f.swap(false, Ordering::SeqCst) {
            to_writer.lock().unwrap().send(()).unwrap();
            reader_rx.lock().unwrap().recv().unwrap();
        }
    })));
    let t2 = t.clone();
    let writer = thread::spawn(move || {
        writer_rx.recv().unwrap();
        assert!(t2.remove(Key::Int(1)).unwrap());
        t2.insert(Key::Int(1), 20).unwrap();
        to_reader.send(()).unwrap();
    });
    let before = t.metrics().search_retries;
    assert_eq!(t.search(Key::Int(1)).unwrap(), Some(20));
    writer.join().unwrap();
    assert!(t.metrics().search_retries > before);
    set_hook(None);
}

#[test]
fn schedule_controlled_reader_retry() {
    let eh = Arc::new(DashEh::create(pool(16), EhConfig::default()).unwrap());
    let e2 = eh.clone();
    reader_retries_after_concurrent_write(eh, move |h| e2.set_read_hook(h));
    let lh = Arc::new(DashLh::create(pool(64), LhConfig::default()).unwrap());
    let l2 = lh.clone();
    reader_retries_after_concurrent_write(lh, move |h| l2.set_read_hook(h));
}

/// Pauses a search for `key` just before it walks the stash and chain, lets
/// `write` run on another thread, then finishes the search.
fn search_across_write(t: &Arc<dyn HashIndex>, set_hook: &dyn Fn(Option<dash_core::table::ReadHook>), key: u64, write: impl FnOnce() + Send + 'static) -> Option<u64> {
    let (to_writer, writer_rx) = mpsc::channel::<()>();
    let (to_reader, reader_rx) = mpsc::channel::<()>();
    let (to_writer, reader_rx) = (Mutex::new(to_writer), Mutex::new(reader_rx));
    let calls = AtomicUsize::new(0);
    set_hook(Some(Arc::new(move || {
        // The second call comes just before the overflow walk.
        if calls.fetch_add(1, Ordering::SeqCst) == 1 {
            to_writer.lock().unwrap().send(()).unwrap();
            reader_rx.lock().unwrap().recv().unwrap();
        }
    })));
    let writer = thread::spawn(move || {
        if writer_rx.recv().is_ok() {
            write();
            to_reader.send(()).unwrap();
        }
    });
    let got = t.search(Key::Int(key)).unwrap();
    set_hook(None);
    writer.join().unwrap();
    got
}

/// Every record of a segment about to split is searched with the split
/// landing just before the search walks the stash and chain.
#[test]
fn split_during_overflow_walk_is_detected() {
    let build_lh = || {
        let lh = Arc::new(
            DashLh::create(pool(2), LhConfig { buckets: 4, stash: 1, base_segments: 1, stride: 1, ..Default::default() })
                .unwrap(),
        );
        let mut k = 0u64;
        loop {
            let before = lh.metrics().chain_allocs;
            lh.insert(Key::Int(k), k).unwrap();
            if lh.metrics().chain_allocs > before {
                return (lh, k + 1);
            }
            k += 1;
        }
    };
    let (_, n) = build_lh();
    let mut paused = 0;
    for key in 0..n {
        let (lh, _) = build_lh();
        let (l2, l3) = (lh.clone(), lh.clone());
        let t: Arc<dyn HashIndex> = lh.clone();
        let got = search_across_write(&t, &move |h| l2.set_read_hook(h), key, move || {
            l3.insert(Key::Int(u64::MAX), 0).unwrap();
            assert!(l3.segment_count() > 1);
        });
        assert_eq!(got, Some(key), "lh key {key}");
        paused += (lh.segment_count() > 1) as u32;
    }
    assert!(paused > 0);

    let eh_cfg = EhConfig { buckets: 4, stash: 1, ..Default::default() };
    let probe = DashEh::create(pool(2), eh_cfg).unwrap();
    let mut n = 0u64;
    while probe.metrics().splits == 0 {
        probe.insert(Key::Int(n), n).unwrap();
        n += 1;
    }
    let n = n - 1;
    let mut paused = 0;
    for key in 0..n {
        let eh = Arc::new(DashEh::create(pool(2), eh_cfg).unwrap());
        for k in 0..n {
            eh.insert(Key::Int(k), k).unwrap();
        }
        let (e2, e3) = (eh.clone(), eh.clone());
        let t: Arc<dyn HashIndex> = eh.clone();
        let got = search_across_write(&t, &move |h| e2.set_read_hook(h), key, move || {
            e3.insert(Key::Int(n), n).unwrap();
            assert_eq!(e3.metrics().splits, 1);
        });
        assert_eq!(got, Some(key), "eh key {key}");
        paused += (eh.metrics().splits > 0) as u32;
    }
    assert!(paused > 0);
}

#[test]
fn readers_during_splits_see_every_key() {
    for (name, t) in tables() {
        let base = 5_000u64;
        for k in 0..base {
            t.insert(Key::Int(k), k).unwrap();
        }
        let done = AtomicBool::new(false);
        let start = Instant::now();
        thread::scope(|s| {
            s.spawn(|| {
                for k in base..base + 100_000 {
                    t.insert(Key::Int(k), k).unwrap();
                }
                done.store(true, Ordering::SeqCst);
            });
            for _ in 0..3 {
                s.spawn(|| {
                    let mut k = 0;
                    while !done.load(Ordering::SeqCst) {
                        assert_eq!(t.search(Key::Int(k)).unwrap(), Some(k), "{name}: key {k}");
                        k = (k + 7919) % base;
                    }
                });
            }
        });
        assert!(t.metrics().splits > 0, "{name}");
        assert!(start.elapsed() < Duration::from_secs(60));
    }
}
