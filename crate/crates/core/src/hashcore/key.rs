//! Inline 8-byte keys and out-of-line variable-length keys.

use super::hash::{hash_bytes, hash_u64};
use crate::error::{Error, Result};
use crate::persist::PersistentPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    Inline,
    Variable,
}

impl KeyMode {
    pub fn tag(self) -> u64 {
        match self {
            KeyMode::Inline => 0,
            KeyMode::Variable => 1,
        }
    }

    pub fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(KeyMode::Inline),
            1 => Ok(KeyMode::Variable),
            t => Err(Error::InvalidConfig(format!("unknown key mode tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Key<'a> {
    Int(u64),
    Bytes(&'a [u8]),
}

impl Key<'_> {
    pub fn hash(&self) -> u64 {
        match self {
            Key::Int(k) => hash_u64(*k),
            Key::Bytes(b) => hash_bytes(b),
        }
    }

    pub fn check_mode(&self, mode: KeyMode) -> Result<()> {
        match (self, mode) {
            (Key::Int(_), KeyMode::Inline) | (Key::Bytes(_), KeyMode::Variable) => Ok(()),
            _ => Err(Error::KeyModeMismatch),
        }
    }

    /// Slot word for a new record: the key itself, or a freshly written key
    /// record.
    pub fn materialize(&self, pool: &PersistentPool) -> Result<u64> {
        match self {
            Key::Int(k) => Ok(*k),
            Key::Bytes(b) => {
                if b.len() > u32::MAX as usize {
                    return Err(Error::InvalidConfig("key longer than 2^32-1 bytes".into()));
                }
                pool.alloc_key(b)
            }
        }
    }
}

/// Per-operation probe counters, folded into table metrics afterwards.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub key_compares: u64,
    pub key_loads: u64,
    pub stash_probes: u64,
    pub retries: u64,
}

/// Full-key comparison between a stored slot word and `key`.
#[inline]
pub fn key_matches(pool: &PersistentPool, slot_word: u64, key: &Key, probe: &mut Probe) -> bool {
    probe.key_compares += 1;
    match key {
        Key::Int(k) => slot_word == *k,
        Key::Bytes(b) => {
            probe.key_loads += 1;
            if pool.key_len(slot_word) as usize != b.len() {
                return false;
            }
            let base = slot_word + 4;
            b.iter().enumerate().all(|(i, &c)| pool.load_u8(base + i as u64) == c)
        }
    }
}

/// Hash of a stored record's key.
pub fn stored_hash(pool: &PersistentPool, mode: KeyMode, slot_word: u64) -> u64 {
    match mode {
        KeyMode::Inline => hash_u64(slot_word),
        KeyMode::Variable => hash_bytes(&pool.key_bytes(slot_word)),
    }
}

/// Owned copy of a stored key, for scans and oracles.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OwnedKey {
    Int(u64),
    Bytes(Vec<u8>),
}

impl OwnedKey {
    pub fn as_key(&self) -> Key<'_> {
        match self {
            OwnedKey::Int(k) => Key::Int(*k),
            OwnedKey::Bytes(b) => Key::Bytes(b),
        }
    }

    pub fn load(pool: &PersistentPool, mode: KeyMode, slot_word: u64) -> Self {
        match mode {
            KeyMode::Inline => OwnedKey::Int(slot_word),
            KeyMode::Variable => OwnedKey::Bytes(pool.key_bytes(slot_word)),
        }
    }
}

impl<'a> From<&'a OwnedKey> for Key<'a> {
    fn from(k: &'a OwnedKey) -> Self {
        k.as_key()
    }
}
