//! Content hashing for provenance chains and frozen-component checks.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::mat::Mat;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Checksum of a named parameter list: names, shapes, and little-endian
/// payload bytes, in order. Bit-identical parameters give identical sums.
pub fn params_checksum(named: &[(String, Arc<Mat>)]) -> String {
    let mut hasher = Sha256::new();
    for (name, mat) in named {
        hasher.update(name.as_bytes());
        hasher.update((mat.rows as u64).to_le_bytes());
        hasher.update((mat.cols as u64).to_le_bytes());
        for v in &mat.data {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn checksum_sensitive_to_values_and_names() {
        let a = vec![("w".to_string(), Arc::new(Mat::row_vec(vec![1.0, 2.0])))];
        let b = vec![("w".to_string(), Arc::new(Mat::row_vec(vec![1.0, 2.0 + 1e-15])))];
        let c = vec![("x".to_string(), Arc::new(Mat::row_vec(vec![1.0, 2.0])))];
        assert_eq!(params_checksum(&a), params_checksum(&a));
        assert_ne!(params_checksum(&a), params_checksum(&b));
        assert_ne!(params_checksum(&a), params_checksum(&c));
    }
}
