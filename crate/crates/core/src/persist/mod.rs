//! Simulated persistent memory: the pool and its allocator.

pub mod alloc;
pub mod pool;

pub use alloc::{BlockInfo, HeapAudit, BLOCK_HEADER};
pub use pool::{CrashPolicy, PersistStats, PersistentPool, PoolHeader, PoolMode, LINE, MIN_CAPACITY};
