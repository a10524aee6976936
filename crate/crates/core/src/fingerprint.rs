use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the JSON encoding of `value`, hex encoded (first 16 bytes).
///
/// Struct fields serialize in declaration order, so the encoding is stable
/// for a given type definition.
pub fn fingerprint<S: Serialize + ?Sized>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize to JSON");
    hex::encode(&Sha256::digest(&bytes)[..16])
}

/// Fingerprint of raw bytes (used for parameter blobs).
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..16])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        let a = fingerprint(&("beta", 1.0));
        assert_eq!(a, fingerprint(&("beta", 1.0)));
        assert_ne!(a, fingerprint(&("beta", 2.0)));
        assert_eq!(a.len(), 32);
    }
}
