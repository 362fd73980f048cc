//! Labeled seed derivation and config hashing.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Sub-seed for `label` under `root`: the first eight bytes of
/// `sha256(root_le || label)`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    format!("{:x}", Sha256::digest(&json))
}
