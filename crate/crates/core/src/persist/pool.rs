//! File-backed persistent region with an explicit flush/fence model.
//!
//! The pool keeps a volatile image (what loads observe) as an array of
//! atomic 64-bit words, so lock-free readers and writers may share it
//! freely. Persistence follows the x86 ADR model at cacheline granularity:
//!
//! - `store*` writes the volatile image only;
//! - `flush` snapshots the covered 64-byte lines into a pending set;
//! - `fence` commits every pending snapshot to the persisted image.
//!
//! In [`PoolMode::CrashSim`] the persisted image is an in-memory shadow and
//! [`PersistentPool::crash`] turns it back into a fresh pool, optionally
//! retaining a seeded subset of dirty lines to model arbitrary cache
//! eviction. In [`PoolMode::Direct`] the persisted image is the backing file
//! and a fence writes the committed lines to it.
//!
//! Every persistence operation (store, flush, fence) is counted. A crash
//! point can be armed at a persistence-op index; the pool then freezes its
//! persisted state right before that operation while execution continues
//! on the volatile image.

use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Persistence granularity.
pub const LINE: u64 = 64;
const LINE_WORDS: usize = (LINE / 8) as usize;

pub const MAGIC: &[u8; 8] = b"DASHPOOL";
pub const FORMAT_VERSION: u32 = 1;
pub const MIN_CAPACITY: u64 = 1 << 20;

pub const HDR_FORMAT_VERSION: u64 = 8;
pub const HDR_CLEAN: u64 = 12;
pub const HDR_GLOBAL_VERSION: u64 = 13;
pub const HDR_ROOT: u64 = 16;
pub const HDR_ALLOC_STATE: u64 = 24;
pub const HEADER_END: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Direct,
    CrashSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPolicy {
    /// Only fenced lines survive.
    Strict,
    /// Fenced lines survive plus a seed-chosen subset of dirty lines.
    Adversarial(u64),
}

/// Decoded pool header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolHeader {
    pub format_version: u32,
    pub clean: bool,
    pub global_version: u8,
    pub root: u64,
    pub alloc_state: u64,
}

/// Snapshot of the persistence-op counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PersistStats {
    pub stores: u64,
    pub bytes_stored: u64,
    pub flushes: u64,
    pub flushed_lines: u64,
    pub fences: u64,
}

impl PersistStats {
    pub fn since(&self, earlier: &PersistStats) -> PersistStats {
        PersistStats {
            stores: self.stores - earlier.stores,
            bytes_stored: self.bytes_stored - earlier.bytes_stored,
            flushes: self.flushes - earlier.flushes,
            flushed_lines: self.flushed_lines - earlier.flushed_lines,
            fences: self.fences - earlier.fences,
        }
    }

    /// Stores + flushes + fences: the index space of crash points.
    pub fn ops(&self) -> u64 {
        self.stores + self.flushes + self.fences
    }
}

#[derive(Default)]
struct Counters {
    stores: AtomicU64,
    bytes_stored: AtomicU64,
    flushes: AtomicU64,
    flushed_lines: AtomicU64,
    fences: AtomicU64,
}

#[derive(Default)]
struct PersistState {
    /// Line snapshots taken at flush time, committed in order at fence.
    pending: Vec<(u64, [u64; LINE_WORDS])>,
    /// Persisted image (crash-sim mode only).
    shadow: Vec<u64>,
}

#[derive(Default)]
struct CrashArm {
    armed: AtomicBool,
    ops_since_arm: AtomicU64,
    at: AtomicU64,
    frozen: Mutex<Option<Frozen>>,
}

struct Frozen {
    shadow: Vec<u64>,
    volatile: Vec<u64>,
}

pub struct PersistentPool {
    words: Box<[AtomicU64]>,
    capacity: u64,
    mode: PoolMode,
    path: Option<PathBuf>,
    file: Option<File>,
    state: Mutex<PersistState>,
    counters: Counters,
    crash: CrashArm,
    log_enabled: AtomicBool,
    store_log: Mutex<Vec<(u64, u64)>>,
    pub(crate) alloc_lock: Mutex<()>,
}

impl std::fmt::Debug for PersistentPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PersistentPool")
            .field("capacity", &self.capacity)
            .field("mode", &self.mode)
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

fn words_to_bytes(words: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(words.len() * 8);
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn bytes_to_words(bytes: &[u8]) -> Vec<u64> {
    bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

impl PersistentPool {
    /// Creates a zeroed pool backed by `path` (truncating any existing file).
    pub fn create(path: impl AsRef<Path>, capacity: u64, mode: PoolMode) -> Result<Self> {
        let path = path.as_ref();
        Self::check_capacity(capacity)?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(capacity)?;
        let pool = Self::from_words(
            vec![0; (capacity / 8) as usize],
            mode,
            Some(path.to_path_buf()),
            Some(file),
        );
        pool.format()?;
        Ok(pool)
    }

    /// Creates a pool with no backing file. Used for sweeps and tests where
    /// the persisted image only needs to live in memory.
    pub fn in_memory(capacity: u64, mode: PoolMode) -> Result<Self> {
        Self::check_capacity(capacity)?;
        let pool = Self::from_words(vec![0; (capacity / 8) as usize], mode, None, None);
        pool.format()?;
        Ok(pool)
    }

    /// Opens an existing pool file and reconciles any in-flight allocation.
    /// Structure contents are left untouched.
    pub fn open(path: impl AsRef<Path>, mode: PoolMode) -> Result<Self> {
        let path = path.as_ref();
        let mut file = match OpenOptions::new().read(true).write(true).open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(Error::NotFound(path.display().to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let len = file.metadata()?.len();
        if len < HEADER_END {
            return Err(Error::Truncated(format!("{len} bytes")));
        }
        let mut bytes = Vec::with_capacity(len as usize);
        file.read_to_end(&mut bytes)?;
        Self::validate_header(&bytes)?;
        if len < MIN_CAPACITY || len % LINE != 0 {
            return Err(Error::Truncated(format!("{len} bytes")));
        }
        let pool = Self::from_words(
            bytes_to_words(&bytes),
            mode,
            Some(path.to_path_buf()),
            Some(file),
        );
        super::alloc::check_extent(&pool)?;
        super::alloc::reconcile(&pool)?;
        Ok(pool)
    }

    fn validate_header(bytes: &[u8]) -> Result<()> {
        if &bytes[0..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        Ok(())
    }

    fn check_capacity(capacity: u64) -> Result<()> {
        if capacity < MIN_CAPACITY {
            return Err(Error::CapacityTooSmall {
                requested: capacity,
                minimum: MIN_CAPACITY,
            });
        }
        if !capacity.is_multiple_of(LINE) {
            return Err(Error::InvalidConfig(format!(
                "capacity {capacity} is not a multiple of {LINE}"
            )));
        }
        Ok(())
    }

    fn from_words(words: Vec<u64>, mode: PoolMode, path: Option<PathBuf>, file: Option<File>) -> Self {
        let capacity = words.len() as u64 * 8;
        let shadow = match mode {
            PoolMode::CrashSim => words.clone(),
            PoolMode::Direct => Vec::new(),
        };
        PersistentPool {
            words: words.into_iter().map(AtomicU64::new).collect(),
            capacity,
            mode,
            path,
            file,
            state: Mutex::new(PersistState {
                pending: Vec::new(),
                shadow,
            }),
            counters: Counters::default(),
            crash: CrashArm::default(),
            log_enabled: AtomicBool::new(false),
            store_log: Mutex::new(Vec::new()),
            alloc_lock: Mutex::new(()),
        }
    }

    fn format(&self) -> Result<()> {
        self.store_bytes(0, MAGIC)?;
        self.store_u32(HDR_FORMAT_VERSION, FORMAT_VERSION);
        self.store_u8(HDR_CLEAN, 1);
        self.store_u8(HDR_GLOBAL_VERSION, 0);
        self.store_u64(HDR_ROOT, 0);
        self.store_u64(HDR_ALLOC_STATE, super::alloc::ALLOC_STATE);
        self.flush(0, HEADER_END)?;
        super::alloc::format(self)?;
        self.fence();
        Ok(())
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn header(&self) -> PoolHeader {
        PoolHeader {
            format_version: self.load_u32(HDR_FORMAT_VERSION),
            clean: self.load_u8(HDR_CLEAN) != 0,
            global_version: self.load_u8(HDR_GLOBAL_VERSION),
            root: self.load_u64(HDR_ROOT),
            alloc_state: self.load_u64(HDR_ALLOC_STATE),
        }
    }

    pub fn stats(&self) -> PersistStats {
        let c = &self.counters;
        PersistStats {
            stores: c.stores.load(Ordering::Relaxed),
            bytes_stored: c.bytes_stored.load(Ordering::Relaxed),
            flushes: c.flushes.load(Ordering::Relaxed),
            flushed_lines: c.flushed_lines.load(Ordering::Relaxed),
            fences: c.fences.load(Ordering::Relaxed),
        }
    }

    // ---- crash-point instrumentation ----

    /// Arms a crash right before the `index`-th persistence op (0-based)
    /// issued from now on. An index past the last op means "crash after
    /// everything", which is what [`crash`](Self::crash) does when the pool
    /// never froze.
    pub fn arm_crash(&self, index: u64) {
        *self.crash.frozen.lock() = None;
        self.crash.ops_since_arm.store(0, Ordering::SeqCst);
        self.crash.at.store(index, Ordering::SeqCst);
        self.crash.armed.store(true, Ordering::SeqCst);
    }

    pub fn is_frozen(&self) -> bool {
        self.crash.frozen.lock().is_some()
    }

    #[inline]
    fn tick(&self) {
        if !self.crash.armed.load(Ordering::Relaxed) {
            return;
        }
        let n = self.crash.ops_since_arm.fetch_add(1, Ordering::SeqCst);
        if n == self.crash.at.load(Ordering::SeqCst) {
            self.crash.armed.store(false, Ordering::SeqCst);
            let shadow = self.state.lock().shadow.clone();
            let volatile = self.volatile_words();
            *self.crash.frozen.lock() = Some(Frozen { shadow, volatile });
        }
    }

    fn volatile_words(&self) -> Vec<u64> {
        self.words.iter().map(|w| w.load(Ordering::Acquire)).collect()
    }

    // ---- store log (used to audit store widths) ----

    pub fn enable_store_log(&self) {
        self.store_log.lock().clear();
        self.log_enabled.store(true, Ordering::SeqCst);
    }

    pub fn take_store_log(&self) -> Vec<(u64, u64)> {
        self.log_enabled.store(false, Ordering::SeqCst);
        std::mem::take(&mut *self.store_log.lock())
    }

    #[inline]
    fn account_store(&self, offset: u64, len: u64) {
        self.tick();
        self.counters.stores.fetch_add(1, Ordering::Relaxed);
        self.counters.bytes_stored.fetch_add(len, Ordering::Relaxed);
        if self.log_enabled.load(Ordering::Relaxed) {
            self.store_log.lock().push((offset, len));
        }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(Error::OutOfRange {
                offset,
                len,
                capacity: self.capacity,
            }),
        }
    }

    #[inline]
    fn word(&self, offset: u64) -> &AtomicU64 {
        &self.words[(offset / 8) as usize]
    }

    // ---- loads ----

    #[inline]
    pub fn load_u64(&self, offset: u64) -> u64 {
        debug_assert!(offset.is_multiple_of(8), "unaligned u64 load at {offset}");
        self.word(offset).load(Ordering::Acquire)
    }

    #[inline]
    pub fn load_u32(&self, offset: u64) -> u32 {
        debug_assert!(offset.is_multiple_of(4), "unaligned u32 load at {offset}");
        (self.word(offset & !7).load(Ordering::Acquire) >> ((offset & 7) * 8)) as u32
    }

    #[inline]
    pub fn load_u8(&self, offset: u64) -> u8 {
        (self.word(offset & !7).load(Ordering::Acquire) >> ((offset & 7) * 8)) as u8
    }

    pub fn read_bytes(&self, offset: u64, out: &mut [u8]) -> Result<()> {
        self.check_range(offset, out.len() as u64)?;
        for (i, b) in out.iter_mut().enumerate() {
            *b = self.load_u8(offset + i as u64);
        }
        Ok(())
    }

    // ---- stores ----

    #[inline]
    pub fn store_u64(&self, offset: u64, value: u64) {
        debug_assert!(offset.is_multiple_of(8), "unaligned u64 store at {offset}");
        self.account_store(offset, 8);
        self.word(offset).store(value, Ordering::Release);
    }

    /// Replaces the `mask` bits of the word at `word_off` with `bits`.
    #[inline]
    fn merge_word(&self, word_off: u64, mask: u64, bits: u64) {
        let w = self.word(word_off);
        let mut cur = w.load(Ordering::Relaxed);
        loop {
            let next = (cur & !mask) | (bits & mask);
            match w.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Relaxed) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    #[inline]
    pub fn store_u32(&self, offset: u64, value: u32) {
        debug_assert!(offset.is_multiple_of(4), "unaligned u32 store at {offset}");
        self.account_store(offset, 4);
        let shift = (offset & 7) * 8;
        self.merge_word(offset & !7, 0xFFFF_FFFFu64 << shift, (value as u64) << shift);
    }

    #[inline]
    pub fn store_u8(&self, offset: u64, value: u8) {
        self.account_store(offset, 1);
        let shift = (offset & 7) * 8;
        self.merge_word(offset & !7, 0xFFu64 << shift, (value as u64) << shift);
    }

    /// Atomically replaces the bits selected by `mask` within one aligned
    /// word; counts as a single store of `len` bytes at `offset`.
    #[inline]
    pub fn store_masked(&self, word_off: u64, mask: u64, bits: u64, offset: u64, len: u64) {
        debug_assert!(word_off.is_multiple_of(8));
        self.account_store(offset, len);
        self.merge_word(word_off, mask, bits);
    }

    /// 4-byte compare-and-exchange. Counts as a store only when it succeeds.
    #[inline]
    pub fn cas_u32(&self, offset: u64, current: u32, new: u32) -> std::result::Result<u32, u32> {
        debug_assert!(offset.is_multiple_of(4));
        let shift = (offset & 7) * 8;
        let mask = 0xFFFF_FFFFu64 << shift;
        let w = self.word(offset & !7);
        let mut cur = w.load(Ordering::Acquire);
        loop {
            let half = (cur >> shift) as u32;
            if half != current {
                return Err(half);
            }
            let next = (cur & !mask) | ((new as u64) << shift);
            match w.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => {
                    self.account_store(offset, 4);
                    return Ok(current);
                }
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn cas_u64(&self, offset: u64, current: u64, new: u64) -> std::result::Result<u64, u64> {
        debug_assert!(offset.is_multiple_of(8));
        match self
            .word(offset)
            .compare_exchange(current, new, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(v) => {
                self.account_store(offset, 8);
                Ok(v)
            }
            Err(v) => Err(v),
        }
    }

    /// Writes an arbitrary byte range as one store op.
    pub fn store_bytes(&self, offset: u64, bytes: &[u8]) -> Result<()> {
        let len = bytes.len() as u64;
        self.check_range(offset, len)?;
        if len == 0 {
            return Ok(());
        }
        self.account_store(offset, len);
        let end = offset + len;
        let mut word_off = offset & !7;
        while word_off < end {
            let lo = offset.max(word_off);
            let hi = end.min(word_off + 8);
            let mut bits = 0u64;
            let mut mask = 0u64;
            for pos in lo..hi {
                let shift = (pos - word_off) * 8;
                bits |= (bytes[(pos - offset) as usize] as u64) << shift;
                mask |= 0xFF << shift;
            }
            if mask == u64::MAX {
                self.word(word_off).store(bits, Ordering::Release);
            } else {
                self.merge_word(word_off, mask, bits);
            }
            word_off += 8;
        }
        Ok(())
    }

    /// Zeroes `[offset, offset+len)` as one store op. Both ends must be
    /// 8-byte aligned.
    pub fn fill_zero(&self, offset: u64, len: u64) -> Result<()> {
        self.check_range(offset, len)?;
        debug_assert!(offset.is_multiple_of(8) && len.is_multiple_of(8));
        if len == 0 {
            return Ok(());
        }
        self.account_store(offset, len);
        for i in (offset / 8)..((offset + len) / 8) {
            self.words[i as usize].store(0, Ordering::Release);
        }
        Ok(())
    }

    // ---- persistence ----

    /// Marks the lines covering `[offset, offset+len)` for write-back,
    /// capturing their current contents.
    pub fn flush(&self, offset: u64, len: u64) -> Result<()> {
        self.check_range(offset, len.max(1))?;
        self.tick();
        let first = offset / LINE;
        let last = (offset + len.max(1) - 1) / LINE;
        self.counters.flushes.fetch_add(1, Ordering::Relaxed);
        self.counters
            .flushed_lines
            .fetch_add(last - first + 1, Ordering::Relaxed);
        let mut state = self.state.lock();
        for line in first..=last {
            let base = (line * LINE / 8) as usize;
            let mut snap = [0u64; LINE_WORDS];
            for (i, s) in snap.iter_mut().enumerate() {
                *s = self.words[base + i].load(Ordering::Acquire);
            }
            state.pending.push((line, snap));
        }
        Ok(())
    }

    /// Commits every pending line.
    pub fn fence(&self) {
        self.tick();
        self.counters.fences.fetch_add(1, Ordering::Relaxed);
        let mut state = self.state.lock();
        if state.pending.is_empty() {
            return;
        }
        let pending = std::mem::take(&mut state.pending);
        match self.mode {
            PoolMode::CrashSim => {
                for (line, snap) in &pending {
                    let base = (line * LINE / 8) as usize;
                    state.shadow[base..base + LINE_WORDS].copy_from_slice(snap);
                }
            }
            PoolMode::Direct => {
                if let Some(file) = &self.file {
                    // Coalesce consecutive lines into single writes.
                    let mut i = 0;
                    while i < pending.len() {
                        let start = pending[i].0;
                        let mut buf = Vec::new();
                        let mut next = start;
                        while i < pending.len() && pending[i].0 == next {
                            for w in &pending[i].1 {
                                buf.extend_from_slice(&w.to_le_bytes());
                            }
                            next += 1;
                            i += 1;
                        }
                        // A failed write-back is a lost persistence guarantee;
                        // there is no caller that could repair it.
                        file.write_all_at(&buf, start * LINE)
                            .expect("pool write-back failed");
                    }
                }
            }
        }
        // Keep the allocation for the next batch.
        state.pending = pending;
        state.pending.clear();
    }

    /// Convenience: flush + fence.
    pub fn persist(&self, offset: u64, len: u64) -> Result<()> {
        self.flush(offset, len)?;
        self.fence();
        Ok(())
    }

    // ---- crash simulation ----

    /// Lines whose volatile content differs from the persisted image.
    pub fn dirty_lines(&self) -> Result<Vec<u64>> {
        if self.mode != PoolMode::CrashSim {
            return Err(Error::NotCrashSim);
        }
        let state = self.state.lock();
        let volatile = self.volatile_words();
        Ok(diff_lines(&state.shadow, &volatile))
    }

    /// The image a crash under `policy` would leave behind.
    pub fn crash_image(&self, policy: CrashPolicy) -> Result<Vec<u64>> {
        if self.mode != PoolMode::CrashSim {
            return Err(Error::NotCrashSim);
        }
        let frozen = self.crash.frozen.lock();
        let (mut image, volatile) = match &*frozen {
            Some(f) => (f.shadow.clone(), f.volatile.clone()),
            None => (self.state.lock().shadow.clone(), self.volatile_words()),
        };
        if let CrashPolicy::Adversarial(seed) = policy {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for line in diff_lines(&image, &volatile) {
                if rng.gen_bool(0.5) {
                    let base = (line * LINE / 8) as usize;
                    image[base..base + LINE_WORDS].copy_from_slice(&volatile[base..base + LINE_WORDS]);
                }
            }
        }
        Ok(image)
    }

    /// Simulates power loss followed by a reboot: the returned pool starts
    /// from the persisted image (written back to the backing file, if any)
    /// with allocator reconciliation already applied.
    pub fn crash(&self, policy: CrashPolicy) -> Result<PersistentPool> {
        let image = self.crash_image(policy)?;
        let file = match &self.path {
            Some(path) => {
                let mut f = OpenOptions::new().write(true).read(true).open(path)?;
                f.write_all(&words_to_bytes(&image))?;
                f.sync_data()?;
                Some(f)
            }
            None => None,
        };
        let pool = Self::from_words(image, PoolMode::CrashSim, self.path.clone(), file);
        super::alloc::reconcile(&pool)?;
        Ok(pool)
    }

    /// In-memory copy of this pool's volatile and persisted state, with fresh
    /// counters. The fork has no backing file.
    pub fn fork(&self) -> PersistentPool {
        let state = self.state.lock();
        let volatile = self.volatile_words();
        let mut pool = Self::from_words(volatile, self.mode, None, None);
        if self.mode == PoolMode::CrashSim {
            pool.state.get_mut().shadow = state.shadow.clone();
        }
        pool
    }

    /// Raw bytes of the persisted image (crash-sim) for inspection.
    pub fn persisted_bytes(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        if self.mode != PoolMode::CrashSim {
            return Err(Error::NotCrashSim);
        }
        self.check_range(offset, len)?;
        let state = self.state.lock();
        let all = words_to_bytes(&state.shadow[(offset / 8) as usize..(offset + len).div_ceil(8) as usize]);
        let start = (offset % 8) as usize;
        Ok(all[start..start + len as usize].to_vec())
    }

    /// Writes the full volatile image to the backing file. Direct mode keeps
    /// the file current at every fence, so this is only needed to persist a
    /// crash-sim pool's volatile state deliberately.
    /// Makes every store issued so far persistent, as a cache write-back
    /// before an orderly shutdown would.
    pub fn write_back_all(&self) -> Result<()> {
        match self.mode {
            PoolMode::CrashSim => {
                for line in self.dirty_lines()? {
                    self.flush(line * LINE, LINE)?;
                }
                self.fence();
                Ok(())
            }
            PoolMode::Direct => self.sync_all(),
        }
    }

    pub fn sync_all(&self) -> Result<()> {
        if let Some(file) = &self.file {
            file.write_all_at(&words_to_bytes(&self.volatile_words()), 0)?;
            file.sync_data()?;
        }
        Ok(())
    }
}

fn diff_lines(a: &[u64], b: &[u64]) -> Vec<u64> {
    a.chunks_exact(LINE_WORDS)
        .zip(b.chunks_exact(LINE_WORDS))
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i as u64)
        .collect()
}
