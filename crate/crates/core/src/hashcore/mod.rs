//! Hashing, fingerprints, version locks and the bucket format shared by both
//! table variants.

pub mod bucket;
pub mod hash;
pub mod key;
pub mod lock;

pub use bucket::{clear_overflow_meta, set_overflow_meta, Bucket, Overflow, Packed, BUCKET_SIZE, SLOTS};
pub use hash::{fingerprint, hash_bytes, hash_u64};
pub use key::{Key, KeyMode, OwnedKey, Probe};
pub use lock::VersionLock;
