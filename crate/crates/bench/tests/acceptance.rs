//! The eight acceptance criteria. Each prints one PASS/FAIL line; the
//! process fails if any criterion does.

use std::collections::HashMap;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dash_bench::crash::{crash_sweep, PolicyKind, Scenario};
use dash_bench::recovery::{constant_work, recovery_probe};
use dash_bench::sweep::{load_factor_sweep, ordering_violations, table_peak, SEGMENT_BUCKETS};
use dash_bench::workload::{create_table, pool_capacity, KeyKind, KeySpace, TableKind};
use dash_core::hashcore::{Key, KeyMode, OwnedKey};
use dash_core::lh::{entry_len, lh_addr, lh_index, lh_locate, pack};
use dash_core::persist::{PersistentPool, PoolMode};
use dash_core::reclaim::EpochManager;
use dash_core::table::{HashIndex, InsertOutcome};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const SEED: u64 = 0x5EED;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn table(kind: TableKind, mode: KeyMode, records: u64) -> Arc<dyn HashIndex> {
    let kk = if mode == KeyMode::Inline { KeyKind::Inline8 } else { KeyKind::Variable(16) };
    let pool = Arc::new(PersistentPool::in_memory(pool_capacity(records, kk), PoolMode::Direct).unwrap());
    create_table(kind, mode, 2, pool).unwrap()
}

fn oracle_equivalence() -> Outcome {
    const OPS: u64 = 1_000_000;
    const UNIVERSE: u64 = 200_000;
    let start = Instant::now();
    for kind in [TableKind::Eh, TableKind::Lh] {
        let t = table(kind, KeyMode::Inline, UNIVERSE);
        let mut model: HashMap<u64, u64> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        for i in 0..OPS {
            let k = rng.gen_range(0..UNIVERSE);
            match rng.gen_range(0..10) {
                0..=3 => {
                    let got = t.insert(Key::Int(k), i).unwrap() == InsertOutcome::Inserted;
                    let want = !model.contains_key(&k);
                    if want {
                        model.insert(k, i);
                    }
                    check(got == want, || format!("{kind} op {i}: insert {k} -> {got}, model {want}"))?;
                }
                4..=6 => {
                    let got = t.search(Key::Int(k)).unwrap();
                    let want = model.get(&k).copied();
                    check(got == want, || format!("{kind} op {i}: search {k} -> {got:?}, model {want:?}"))?;
                }
                _ => {
                    let got = t.remove(Key::Int(k)).unwrap();
                    let want = model.remove(&k).is_some();
                    check(got == want, || format!("{kind} op {i}: remove {k} -> {got}, model {want}"))?;
                }
            }
        }
        let scanned: HashMap<u64, u64> = t
            .scan()
            .into_iter()
            .map(|(k, v)| match k {
                OwnedKey::Int(k) => (k, v),
                other => panic!("unexpected key {other:?}"),
            })
            .collect();
        check(scanned == model, || format!("{kind}: final contents differ from the model"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("2 x {OPS} mixed ops match a HashMap in {secs:.1} s"))
}

fn load_factor_reproduction() -> Outcome {
    let start = Instant::now();
    let rows = load_factor_sweep(&SEGMENT_BUCKETS, 5, SEED);
    let bad = ordering_violations(&rows);
    check(bad.is_empty(), || format!("ordering: {}", bad.join("; ")))?;
    let s2 = table_peak(TableKind::Eh, 2, 200_000, SEED).unwrap().peak_load_factor;
    let s4 = table_peak(TableKind::Eh, 4, 200_000, SEED).unwrap().peak_load_factor;
    check(s2 >= 0.70, || format!("stash 2 peak {s2:.3} < 0.70"))?;
    check(s4 >= 0.80, || format!("stash 4 peak {s4:.3} < 0.80"))?;
    let largest = *SEGMENT_BUCKETS.last().unwrap();
    let bucketized = rows
        .iter()
        .find(|r| r.buckets == largest && r.technique == "bucketized")
        .unwrap()
        .mean_peak_load_factor;
    check(bucketized <= 0.55, || format!("bucketized large-segment peak {bucketized:.3} > 0.55"))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 300.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "ordering holds at {} sizes; table peaks S=2 {s2:.3}, S=4 {s4:.3}; bucketized {bucketized:.3}",
        SEGMENT_BUCKETS.len()
    ))
}

fn probe_efficiency() -> Outcome {
    const N: u64 = 100_000;
    let start = Instant::now();
    let keys = KeySpace::new(SEED, KeyKind::Inline8);
    // Grow until the first positive overflow count would appear.
    let t = table(TableKind::Eh, KeyMode::Inline, N);
    let mut loaded = 0;
    for i in 0..N {
        t.insert(keys.key(i).as_key(), i).unwrap();
        if t.positive_overflow_counts() > 0 {
            t.remove(keys.key(i).as_key()).unwrap();
            break;
        }
        loaded += 1;
    }
    check(t.positive_overflow_counts() == 0, || "positive overflow counters remain".into())?;
    let before = t.metrics();
    let mut stash_leaks = 0;
    for i in 0..N {
        let k = keys.negative(i);
        let free = t.stash_candidates(k.as_key()) == 0;
        let m0 = t.metrics();
        check(t.search(k.as_key()).unwrap().is_none(), || format!("negative key {i} found"))?;
        if free && t.metrics().since(&m0).search_stash_probes > 0 {
            stash_leaks += 1;
        }
    }
    let d = t.metrics().since(&before);
    let compares = d.search_key_compares as f64 / N as f64;
    check(compares < 0.2, || format!("mean key compares {compares:.4} >= 0.2"))?;
    check(stash_leaks == 0, || format!("{stash_leaks} searches probed the stash without a fingerprint match"))?;

    let vkeys = KeySpace::new(SEED, KeyKind::Variable(16));
    let v = table(TableKind::Eh, KeyMode::Variable, N);
    for i in 0..N {
        v.insert(vkeys.key(i).as_key(), i).unwrap();
    }
    let before = v.metrics();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..N {
        let i = rng.gen_range(0..N);
        check(v.search(vkeys.key(i).as_key()).unwrap() == Some(i), || format!("variable key {i} missing"))?;
    }
    let loads = v.metrics().since(&before).search_key_loads as f64 / N as f64;
    check(loads <= 1.1, || format!("mean key loads {loads:.4} > 1.1"))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{loaded} records, {N} negatives: {compares:.4} compares/search, 0 stray stash probes; {loads:.4} key loads/search"
    ))
}

fn read_only_purity() -> Outcome {
    const N: u64 = 50_000;
    let keys = KeySpace::new(SEED, KeyKind::Inline8);
    for kind in [TableKind::Eh, TableKind::Lh] {
        for mode in [KeyMode::Inline, KeyMode::Variable] {
            let kk = if mode == KeyMode::Inline { KeyKind::Inline8 } else { KeyKind::Variable(16) };
            let keys = if mode == KeyMode::Inline { keys } else { KeySpace::new(SEED, kk) };
            let t = table(kind, mode, N);
            for i in 0..N {
                t.insert(keys.key(i).as_key(), i).unwrap();
            }
            t.drain_retired();
            let before = t.pool().stats();
            for i in 0..N {
                t.search(keys.key(i).as_key()).unwrap();
                t.search(keys.negative(i).as_key()).unwrap();
            }
            let d = t.pool().stats().since(&before);
            check(d.stores == 0 && d.flushes == 0 && d.fences == 0, || {
                format!("{kind} {mode:?}: {} stores, {} flushes, {} fences", d.stores, d.flushes, d.fences)
            })?;
        }
    }
    Ok(format!("{} searches per table and key mode issued no persistence ops", 2 * N))
}

fn crash_consistency() -> Outcome {
    let start = Instant::now();
    let mut points = 0;
    let mut dups = 0;
    for policy in [PolicyKind::Strict, PolicyKind::Adversarial] {
        for s in Scenario::ALL {
            let r = crash_sweep(s, SEED, None, policy)?;
            check(r.passed(), || format!("{} {:?}: {}", s.name(), policy, r.first_failure))?;
            check(r.points_checked == r.persistence_ops + 1, || format!("{}: points skipped", s.name()))?;
            points += r.points_checked;
            dups += r.duplicate_windows;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 600.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{points} crash points over 5 scenarios x 2 policies; {dups} transient duplicates all removed; {secs:.0} s"
    ))
}

fn recovery_constancy() -> Outcome {
    let mut summary = Vec::new();
    for kind in [TableKind::Eh, TableKind::Lh] {
        let rows = recovery_probe(kind, &[10_000, 100_000, 1_000_000], SEED).map_err(|e| e.to_string())?;
        check(constant_work(&rows), || format!("{kind}: restart work varies with size: {rows:?}"))?;
        check(rows.iter().all(|r| r.first_search_hit), || format!("{kind}: first search missed"))?;
        for r in rows.iter().filter(|r| r.path == "clean") {
            check(r.bytes_stored == 1, || format!("{kind} clean restart stored {} bytes", r.bytes_stored))?;
        }
        let crash = rows.iter().find(|r| r.path == "crash").unwrap();
        summary.push(format!("{kind} crash restart {} stores/{} bytes", crash.stores, crash.bytes_stored));
    }
    Ok(format!("{}; clean restart 1 byte at every size", summary.join(", ")))
}

fn poison_check() -> Result<u64, String> {
    const ITEMS: usize = 100_000;
    const POISON: u64 = 0xDEAD;
    let cells: Arc<Vec<AtomicU64>> = Arc::new((0..ITEMS).map(|_| AtomicU64::new(1)).collect());
    let c = cells.clone();
    let mgr = EpochManager::new(move |i: usize| c[i].store(POISON, Ordering::SeqCst));
    let current = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let violations = AtomicU64::new(0);
    thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                while !stop.load(Ordering::Relaxed) {
                    let _g = mgr.enter();
                    let i = current.load(Ordering::SeqCst);
                    if cells[i].load(Ordering::SeqCst) == POISON {
                        violations.fetch_add(1, Ordering::SeqCst);
                    }
                }
            });
        }
        for next in 1..ITEMS {
            let _g = mgr.enter();
            mgr.retire(current.swap(next, Ordering::SeqCst));
        }
        stop.store(true, Ordering::SeqCst);
    });
    for _ in 0..4 {
        mgr.try_advance_and_drain();
    }
    check(mgr.freed_total() == (ITEMS - 1) as u64, || "retired cells not all freed".into())?;
    Ok(violations.load(Ordering::SeqCst))
}

fn concurrency_stress() -> Outcome {
    const PER: u64 = 100_000;
    for kind in [TableKind::Eh, TableKind::Lh] {
        let t = table(kind, KeyMode::Inline, 8 * PER);
        thread::scope(|s| {
            for w in 0..8u64 {
                let t = &t;
                s.spawn(move || {
                    for i in 0..PER {
                        let k = w << 40 | i;
                        assert_eq!(t.insert(Key::Int(k), k).unwrap(), InsertOutcome::Inserted);
                    }
                });
            }
        });
        for w in 0..8u64 {
            for i in 0..PER {
                let k = w << 40 | i;
                check(t.search(Key::Int(k)).unwrap() == Some(k), || format!("{kind}: key {k:#x} lost"))?;
            }
        }
        let structure = t.check_structure();
        check(structure.is_empty(), || format!("{kind}: {}", structure.join("; ")))?;
    }

    let mut retries = 0;
    let mut reads_total = 0;
    for kind in [TableKind::Eh, TableKind::Lh] {
        let t = table(kind, KeyMode::Inline, 2_000_000);
        let stop = AtomicBool::new(false);
        let acked: Vec<AtomicU64> = (0..4).map(|_| AtomicU64::new(0)).collect();
        let lost = AtomicU64::new(0);
        let first_miss = Mutex::new(String::new());
        let reads = AtomicU64::new(0);
        let before = t.metrics();
        thread::scope(|s| {
            for w in 0..4u64 {
                let (t, stop, acked) = (&t, &stop, &acked);
                s.spawn(move || {
                    let mut i = 0;
                    while !stop.load(Ordering::Relaxed) {
                        let k = (w + 1) << 40 | i;
                        t.insert(Key::Int(k), i).unwrap();
                        if i % 4 == 0 {
                            t.insert(Key::Int(k), i + 1).unwrap();
                        }
                        acked[w as usize].store(i + 1, Ordering::Release);
                        i += 1;
                    }
                });
            }
            for r in 0..4u64 {
                let (t, stop, acked, lost, reads, first_miss) = (&t, &stop, &acked, &lost, &reads, &first_miss);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(r);
                    while !stop.load(Ordering::Relaxed) {
                        let w = rng.gen_range(0..4u64);
                        let n = acked[w as usize].load(Ordering::Acquire);
                        if n == 0 {
                            continue;
                        }
                        let i = rng.gen_range(0..n);
                        let k = (w + 1) << 40 | i;
                        let got = t.search(Key::Int(k)).unwrap();
                        if got != Some(i) && lost.fetch_add(1, Ordering::Relaxed) == 0 {
                            let again = t.search(Key::Int(k)).unwrap();
                            *first_miss.lock().unwrap() = format!("key {k:#x} read {got:?}, then {again:?}, want {i}");
                        }
                        reads.fetch_add(1, Ordering::Relaxed);
                    }
                });
            }
            thread::sleep(Duration::from_secs(10));
            stop.store(true, Ordering::Relaxed);
        });
        let n_lost = lost.load(Ordering::Relaxed);
        check(n_lost == 0, || {
            format!("{kind}: {n_lost} reads missed acknowledged keys, first: {}", first_miss.lock().unwrap())
        })?;
        for (w, a) in acked.iter().enumerate() {
            for i in 0..a.load(Ordering::Relaxed) {
                let k = (w as u64 + 1) << 40 | i;
                check(t.search(Key::Int(k)).unwrap() == Some(i), || format!("{kind}: writer {w} key {i} lost"))?;
            }
        }
        let structure = t.check_structure();
        check(structure.is_empty(), || format!("{kind}: {}", structure.join("; ")))?;
        let reachable = t.owned_blocks().into_iter().collect();
        let heap = t.pool().audit_heap().violations(&reachable);
        check(heap.is_empty(), || format!("{kind}: heap audit: {}", heap.join("; ")))?;
        retries += t.metrics().since(&before).search_retries;
        reads_total += reads.load(Ordering::Relaxed);
    }

    let poisoned = poison_check()?;
    check(poisoned == 0, || format!("{poisoned} reads of reclaimed cells"))?;
    Ok(format!(
        "8 x {PER} disjoint inserts retrievable; 4W+4R x 10 s on both tables: {reads_total} reads, {retries} retries, 0 lost; 0 poisoned reads"
    ))
}

/// Independent enumeration: entries laid out one after another, entry `e`
/// holding `M * 2^(e / s)` segments.
fn enumerate_layout(m: u64, s: u64, upto: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::with_capacity(upto as usize);
    let mut e = 0;
    while (out.len() as u64) < upto {
        let len = m * 2u64.pow((e / s) as u32);
        for off in 0..len {
            out.push((e, off));
        }
        e += 1;
    }
    out.truncate(upto as usize);
    out
}

fn hybrid_expansion_math() -> Outcome {
    const X: u64 = 10_000;
    let mut checked = 0;
    for m in [1u64, 64] {
        for s in [4u64, 8] {
            let layout = enumerate_layout(m, s, X);
            for x in 0..X {
                let (e, off) = lh_locate(x, m, s).map_err(|e| e.to_string())?;
                check((e, off) == layout[x as usize], || format!("M={m} s={s} x={x}: ({e},{off})"))?;
                check(off < entry_len(e, m, s), || format!("M={m} s={s} x={x}: offset outside entry"))?;
                check(lh_index(e, off, m, s) == x, || format!("M={m} s={s} x={x}: round trip"))?;
                let before: u64 = (0..e).map(|p| entry_len(p, m, s)).sum();
                check(before + off == x, || format!("M={m} s={s} x={x}: capacity accounting"))?;
                checked += 1;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(m * s);
            for n in 0..6u32 {
                for next in [0, (m << n) / 2, (m << n) - 1] {
                    let addressable = (m << n) + next;
                    for _ in 0..2000 {
                        let a = lh_addr(rng.gen(), pack(n, next as u32), m);
                        check(a < addressable, || format!("M={m} N={n} Next={next}: address {a} >= {addressable}"))?;
                    }
                }
            }
        }
    }
    let fig: Vec<u64> = (0..8).map(|e| entry_len(e, 1, 4)).collect();
    check(fig == [1, 1, 1, 1, 2, 2, 2, 2], || format!("entry sizes {fig:?}"))?;
    let want = [(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (4, 1), (5, 0), (5, 1), (6, 0), (6, 1), (7, 0), (7, 1)];
    for (x, w) in want.iter().enumerate() {
        let got = lh_locate(x as u64, 1, 4).map_err(|e| e.to_string())?;
        check(got == *w, || format!("M=1 s=4 segment {x}: {got:?}, expected {w:?}"))?;
    }
    Ok(format!("{checked} indices round-trip over the grid; entries 0-3 hold 1 segment, 4-7 hold 2"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 load-factor reproduction", load_factor_reproduction),
        ("3 probe efficiency", probe_efficiency),
        ("4 read-only purity", read_only_purity),
        ("5 crash-consistency sweep", crash_consistency),
        ("6 instant-recovery constancy", recovery_constancy),
        ("7 concurrency stress", concurrency_stress),
        ("8 hybrid-expansion math", hybrid_expansion_math),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
