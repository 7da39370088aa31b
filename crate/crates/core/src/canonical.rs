//! Canonical text serialization, content digests and deterministic id/seed derivation.
//!
//! Canonical form is compact UTF-8 JSON with object keys in lexicographic order.
//! Every persisted record (asset sidecars, manifests, bank files, rating logs)
//! goes through [`to_canonical_string`], so digests are stable across runs,
//! machines and implementations.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` canonically: sorted keys, no insignificant whitespace.
///
/// Struct fields are routed through `serde_json::Value`, whose map type is
/// ordered, so the declaration order of fields never leaks into the output.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let tree = serde_json::to_value(value)?;
    serde_json::to_string(&tree)
}

/// Re-serializes arbitrary JSON text into canonical form.
pub fn canonicalize_json(text: &str) -> serde_json::Result<String> {
    let tree: serde_json::Value = serde_json::from_str(text)?;
    serde_json::to_string(&tree)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical serialization of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    Ok(sha256_hex(to_canonical_string(value)?.as_bytes()))
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    let out = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    u64::from_le_bytes(word)
}

/// Deterministic identifier for the `index`-th output of `stage`.
///
/// The id is a short readable prefix plus 16 hex digits of
/// `sha256(run_id, product_id, stage, seed, index)`.
pub fn derive_id(prefix: &str, run_id: &str, product_id: &str, stage: &str, seed: u64, index: usize) -> String {
    let material = serde_json::json!([run_id, product_id, stage, seed, index]);
    let digest = sha256_hex(material.to_string().as_bytes());
    format!("{prefix}-{}", &digest[..16])
}
