use std::collections::HashSet;
use std::sync::Arc;

use dash_core::hashcore::{Key, OwnedKey};
use dash_core::lh::{DashLh, LhConfig};
use dash_core::persist::{CrashPolicy, PersistentPool, PoolMode, MIN_CAPACITY};
use dash_core::table::HashIndex;

fn int_keys(t: &DashLh) -> Vec<u64> {
    t.scan()
        .into_iter()
        .map(|(k, _)| match k {
            OwnedKey::Int(k) => k,
            OwnedKey::Bytes(_) => panic!("inline table returned a byte key"),
        })
        .collect()
}

fn check(t: &DashLh, present: &[u64], maybe: &[u64]) {
    t.recover_all().unwrap();
    assert_eq!(t.check_structure(), Vec::<String>::new());
    for &k in present {
        assert_eq!(t.search(Key::Int(k)).unwrap(), Some(k + 1), "key {k} lost");
    }
    let keys = int_keys(t);
    let uniq: HashSet<u64> = keys.iter().copied().collect();
    assert_eq!(uniq.len(), keys.len(), "duplicate records after recovery");
    assert!(keys.len() >= present.len() && keys.len() <= present.len() + maybe.len());
    let reachable: HashSet<u64> = t.owned_blocks().into_iter().collect();
    assert_eq!(t.pool().audit_heap().violations(&reachable), Vec::<String>::new());
}

/// Builds a table until the next insert performs a split that `wanted`
/// accepts, then crashes that insert at every persistence op.
fn sweep(cfg: LhConfig, wanted: impl Fn(&DashLh, u64, u64) -> bool, policy: impl Fn(u64) -> CrashPolicy) {
    let pool = Arc::new(PersistentPool::in_memory(8 * MIN_CAPACITY, PoolMode::CrashSim).unwrap());
    let t = DashLh::create(pool.clone(), cfg).unwrap();
    let mut present = Vec::new();
    let mut k = 0u64;
    let trigger = loop {
        assert!(k < 200_000, "no qualifying split found");
        let probe = DashLh::restart(Arc::new(pool.fork())).unwrap();
        let chains_before: usize = probe.populated().iter().map(|&(_, s)| chain_len(&probe, s)).sum();
        probe.insert(Key::Int(k), k + 1).unwrap();
        let chains_after: usize = probe.populated().iter().map(|&(_, s)| chain_len(&probe, s)).sum();
        if probe.metrics().splits > 0 && wanted(&probe, chains_before as u64, chains_after as u64) {
            break k;
        }
        t.insert(Key::Int(k), k + 1).unwrap();
        present.push(k);
        k += 1;
    };
    t.shutdown().unwrap();
    let ops = {
        let p = Arc::new(pool.fork());
        let probe = DashLh::restart(p.clone()).unwrap();
        let before = p.stats();
        probe.insert(Key::Int(trigger), trigger + 1).unwrap();
        p.stats().since(&before).ops()
    };
    assert!(ops > 10);
    for i in 0..=ops {
        let p = Arc::new(pool.fork());
        let run = DashLh::restart(p.clone()).unwrap();
        p.arm_crash(i);
        run.insert(Key::Int(trigger), trigger + 1).unwrap();
        let back = DashLh::restart(Arc::new(p.crash(policy(i)).unwrap())).unwrap();
        check(&back, &present, &[trigger]);
        back.insert(Key::Int(1 << 40), 7).unwrap();
        assert_eq!(back.search(Key::Int(1 << 40)).unwrap(), Some(7));
    }
}

fn chain_len(t: &DashLh, seg: u64) -> usize {
    dash_core::segment::Segment::new(t.pool(), seg, t.geometry()).chain().len()
}

fn small() -> LhConfig {
    LhConfig { buckets: 8, stash: 1, base_segments: 2, stride: 2, ..Default::default() }
}

#[test]
fn split_survives_strict_crash_at_every_op() {
    sweep(small(), |_, _, _| true, |_| CrashPolicy::Strict);
}

#[test]
fn split_that_drains_a_chain_survives_every_crash_point() {
    sweep(small(), |_, before, after| after < before, |_| CrashPolicy::Strict);
}

#[test]
fn split_survives_adversarial_crash_at_every_op() {
    sweep(small(), |_, before, after| after < before, CrashPolicy::Adversarial);
}

#[test]
fn restart_preserves_round_and_contents() {
    let pool = Arc::new(PersistentPool::in_memory(8 * MIN_CAPACITY, PoolMode::CrashSim).unwrap());
    let t = DashLh::create(pool.clone(), small()).unwrap();
    for k in 0..5000u64 {
        t.insert(Key::Int(k), k + 1).unwrap();
    }
    let round = t.round();
    let back = DashLh::restart(Arc::new(pool.crash(CrashPolicy::Strict).unwrap())).unwrap();
    assert_eq!(back.round(), round);
    let present: Vec<u64> = (0..5000).collect();
    check(&back, &present, &[]);
}
