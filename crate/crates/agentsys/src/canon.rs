//! Canonical JSON rendering.
//!
//! Every serialization that feeds a determinism or containment check goes
//! through [`to_string`]: object keys sorted, compact separators, no
//! trailing whitespace. Two structurally equal values always render to the
//! same bytes regardless of construction order.

use serde_json::Value;

/// Render a JSON value canonically: sorted keys, compact form.
pub fn to_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        // serde_json renders numbers and escaped strings deterministically.
        Value::Number(_) | Value::String(_) => {
            out.push_str(&serde_json::to_string(value).expect("scalar serializes"))
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("key serializes"));
                out.push(':');
                write_value(out, &map[key]);
            }
            out.push('}');
        }
    }
}

/// Canonical rendering of anything serializable.
pub fn to_string_of<T: serde::Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes");
    to_string(&v)
}

/// Hex SHA-256 of a canonical rendering; used for config digests.
pub fn digest(value: &Value) -> String {
    use sha2::{Digest, Sha256};
    let bytes = to_string(value);
    let hash = Sha256::digest(bytes.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
