//! Content fingerprints for configs and artifacts.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the compact JSON serialization. Struct fields serialize in
/// declaration order and maps keep insertion order, so equal values give
/// equal fingerprints.
pub fn fingerprint<S: Serialize + ?Sized>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes to JSON");
    hex::encode(Sha256::digest(&bytes))
}

/// SHA-256 of raw bytes, hex encoded.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 16 hex characters, for display and directory names.
pub fn short(fp: &str) -> &str {
    &fp[..fp.len().min(16)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        let a = serde_json::json!({"seed": 1, "lr": 0.005});
        let b = serde_json::json!({"seed": 2, "lr": 0.005});
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(short(&fingerprint(&a)).len(), 16);
        assert_eq!(digest_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
