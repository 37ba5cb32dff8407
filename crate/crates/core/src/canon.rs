//! Canonical JSON: sorted keys, no whitespace, floats at 9 significant
//! digits.  Byte-equality of two canonical documents is the determinism
//! check used throughout the tests, and content hashes are computed over
//! canonical bytes.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serialize any value to its canonical JSON form.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    let mut out = String::new();
    write_value(&v, &mut out);
    out
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Hex SHA-256 of the canonical JSON of a value.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(to_canonical_json(value).as_bytes())
}

fn write_value(v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Null => out.push_str("null"),
        serde_json::Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().expect("finite JSON number")));
            }
        }
        serde_json::Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string escapes"));
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        serde_json::Value::Object(map) => {
            // serde_json's default map is key-sorted, but sort explicitly so
            // canonicality does not depend on a feature flag.
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key escapes"));
                out.push(':');
                write_value(&map[*k], out);
            }
            out.push('}');
        }
    }
}

/// Fixed 9-significant-digit float format.  `parse(format(x))` re-formats to
/// the same bytes, so canonical documents are stable under round-trips.
fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0.0".to_string();
    }
    format!("{x:.8e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keys_are_sorted_and_output_is_compact() {
        let v = serde_json::json!({"b": 1, "a": [true, null], "c": {"z": "x", "y": 0.5}});
        assert_eq!(
            to_canonical_json(&v),
            r#"{"a":[true,null],"b":1,"c":{"y":5.00000000e-1,"z":"x"}}"#
        );
    }

    #[test]
    fn integers_and_floats_format_distinctly() {
        #[derive(Serialize)]
        struct S {
            id: u32,
            x: f64,
        }
        assert_eq!(
            to_canonical_json(&S { id: 3, x: 1.0 }),
            r#"{"id":3,"x":1.00000000e0}"#
        );
    }

    #[test]
    fn hash_is_stable() {
        let v = serde_json::json!({"a": 1});
        assert_eq!(canonical_hash(&v), canonical_hash(&v));
    }

    proptest! {
        #[test]
        fn float_format_is_roundtrip_stable(x in -1e12f64..1e12f64) {
            let s1 = format_float(x);
            let y: f64 = s1.parse().unwrap();
            let s2 = format_float(y);
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn canonical_json_is_parse_reformat_stable(
            a in -1e6f64..1e6f64,
            b in 0u64..1_000_000,
            s in "[a-z ]{0,12}",
        ) {
            let v = serde_json::json!({"x": a, "n": b, "s": s, "nested": {"y": a * 0.37}});
            let c1 = to_canonical_json(&v);
            let reparsed: serde_json::Value = serde_json::from_str(&c1).unwrap();
            let c2 = to_canonical_json(&reparsed);
            prop_assert_eq!(c1, c2);
        }
    }
}
