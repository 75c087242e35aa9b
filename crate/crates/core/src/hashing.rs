//! Stable content hashes. `std`'s hasher is not guaranteed stable across
//! releases, and seeds/partitions derived here end up in on-disk artifacts.

use sha2::{Digest, Sha256};

/// First 8 bytes (little-endian) of SHA-256 over the length-prefixed parts.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let digest = digest_parts(parts);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hex SHA-256 over several byte strings, each length-prefixed so
/// that concatenation boundaries matter.
pub fn sha256_hex_parts(parts: &[&[u8]]) -> String {
    hex::encode(digest_parts(parts))
}

fn digest_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_are_significant() {
        assert_ne!(stable_hash64(&[b"ab", b"c"]), stable_hash64(&[b"a", b"bc"]));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
