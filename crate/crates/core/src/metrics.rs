//! Exact event counters kept by each table.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::hashcore::Probe;

macro_rules! counters {
    ($($name:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct TableMetrics {
            $(pub $name: AtomicU64,)*
        }

        #[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
        pub struct MetricsSnapshot {
            $(pub $name: u64,)*
        }

        impl TableMetrics {
            pub fn snapshot(&self) -> MetricsSnapshot {
                MetricsSnapshot {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }

            pub fn reset(&self) {
                $(self.$name.store(0, Ordering::Relaxed);)*
            }
        }

        impl MetricsSnapshot {
            pub fn since(&self, earlier: &MetricsSnapshot) -> MetricsSnapshot {
                MetricsSnapshot {
                    $($name: self.$name - earlier.$name,)*
                }
            }
        }
    };
}

counters!(
    searches,
    search_hits,
    search_key_compares,
    search_key_loads,
    search_stash_probes,
    search_retries,
    inserts,
    removes,
    displacements,
    stash_inserts,
    splits,
    doublings,
    chain_allocs,
    next_advances,
    segment_recoveries,
);

impl TableMetrics {
    #[inline]
    pub fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_search(&self, probe: &Probe, hit: bool) {
        self.searches.fetch_add(1, Ordering::Relaxed);
        if hit {
            self.search_hits.fetch_add(1, Ordering::Relaxed);
        }
        if probe.key_compares != 0 {
            self.search_key_compares.fetch_add(probe.key_compares, Ordering::Relaxed);
        }
        if probe.key_loads != 0 {
            self.search_key_loads.fetch_add(probe.key_loads, Ordering::Relaxed);
        }
        if probe.stash_probes != 0 {
            self.search_stash_probes.fetch_add(probe.stash_probes, Ordering::Relaxed);
        }
        if probe.retries != 0 {
            self.search_retries.fetch_add(probe.retries, Ordering::Relaxed);
        }
    }
}
