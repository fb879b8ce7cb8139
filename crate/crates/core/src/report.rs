//! JSON report helpers. Floating-point fields are rounded to 12 significant
//! digits so reports compare byte-for-byte across platforms.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

pub fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Rounds every non-integer number in `value`.
pub fn normalize(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(round_significant(x)))
            .map_or(Value::Null, Value::Number),
        Value::Array(items) => Value::Array(items.into_iter().map(normalize).collect()),
        Value::Object(map) => {
            Value::Object(map.into_iter().map(|(k, v)| (k, normalize(v))).collect())
        }
        other => other,
    }
}

pub fn to_value<T: Serialize>(value: &T) -> Result<Value> {
    Ok(normalize(serde_json::to_value(value)?))
}

pub fn render(value: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(round_significant(1.0 / 3.0), 0.333333333333);
        assert_eq!(round_significant(2.0 / 3.0 * 1e-7), 6.66666666667e-8);
        assert_eq!(round_significant(0.0), 0.0);
        let v = normalize(json!({"a": [1, 0.1 + 0.2], "b": {"c": 1e300 * 10.0}}));
        assert_eq!(v, json!({"a": [1, 0.3], "b": {"c": 1e301}}));
    }
}
