//! Canonical JSON serialization and content hashing.
//!
//! Canonical form: object keys sorted lexicographically (byte order), arrays
//! in declared order, numbers in shortest round-trip decimal form, UTF-8,
//! no insignificant whitespace. `serde_json` with its default `BTreeMap`
//! backed map already sorts keys and uses ryu/itoa shortest forms, so the
//! canonical bytes of a [`serde_json::Value`] are its compact serialization.

use serde_json::Value;
use sha2::{Digest, Sha256};

/// Serializes a JSON value to its canonical byte form.
pub fn to_canonical_bytes(value: &Value) -> Vec<u8> {
    // Compact serialization of a Value cannot fail.
    serde_json::to_vec(value).expect("canonical serialization")
}

/// SHA-256 over canonical bytes, as a 32-byte digest.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

/// Builds a JSON number from a finite f64.
///
/// Panics on non-finite input; quantities are finite by construction so a
/// non-finite value here is a logic error, not a data error.
pub fn json_f64(v: f64) -> Value {
    Value::Number(serde_json::Number::from_f64(v).expect("finite number"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_compact() {
        let v: Value = serde_json::from_str(r#"{"b": 1.0, "a": {"z": 2, "y": 3}}"#).unwrap();
        assert_eq!(
            String::from_utf8(to_canonical_bytes(&v)).unwrap(),
            r#"{"a":{"y":3,"z":2},"b":1.0}"#
        );
    }

    #[test]
    fn float_forms_normalize() {
        // 1.0 and 1.00 parse to the same f64 and print identically.
        let a: Value = serde_json::from_str("[1.0]").unwrap();
        let b: Value = serde_json::from_str("[1.00]").unwrap();
        assert_eq!(to_canonical_bytes(&a), to_canonical_bytes(&b));
    }

    #[test]
    fn digest_changes_with_content() {
        let a = to_canonical_bytes(&json!({"k": "v1"}));
        let b = to_canonical_bytes(&json!({"k": "v2"}));
        assert_ne!(sha256(&a), sha256(&b));
    }
}
