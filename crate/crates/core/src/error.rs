use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pool capacity {requested} is below the minimum of {minimum} bytes")]
    CapacityTooSmall { requested: u64, minimum: u64 },

    #[error("pool file not found: {0}")]
    NotFound(String),

    #[error("bad pool magic")]
    BadMagic,

    #[error("unsupported pool format version {0}")]
    BadVersion(u32),

    #[error("pool file is truncated: {0}")]
    Truncated(String),

    #[error("access [{offset}, {offset}+{len}) is outside the pool (capacity {capacity})")]
    OutOfRange { offset: u64, len: u64, capacity: u64 },

    #[error("pool is out of space (requested {0} bytes)")]
    OutOfSpace(u64),

    #[error("operation requires a crash-simulation pool")]
    NotCrashSim,

    #[error("allocator free-list table is full")]
    TooManySizeClasses,

    #[error("block at offset {0} is not in the retirement list")]
    NotRetired(u64),

    #[error("bucket is full")]
    BucketFull,

    #[error("key kind does not match the table's key mode")]
    KeyModeMismatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("pool does not contain a {expected} table")]
    WrongTableKind { expected: &'static str },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}
