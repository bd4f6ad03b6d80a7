//! Key hashing and the fingerprint/address bit split.

/// Seed used by libstdc++'s `std::_Hash_bytes`, which wraps the same
/// MurmurHash64A variant.
pub const SEED: u64 = 0xc70f_6907;

#[inline]
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    murmur2::murmur64a(bytes, SEED)
}

#[inline]
pub fn hash_u64(key: u64) -> u64 {
    hash_bytes(&key.to_le_bytes())
}

/// One-byte fingerprint: the low byte of the hash.
#[inline]
pub fn fingerprint(h: u64) -> u8 {
    (h & 0xFF) as u8
}
