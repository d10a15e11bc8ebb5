//! Byte-stable JSON: sorted keys, floats rounded to 9 significant digits.

use serde::Serialize;
use serde_json::Value;

/// `x` rounded to 9 significant digits, printed in shortest round-trip form.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded:?}")
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => out.push_str(&u.to_string()),
            (_, Some(i), _) => out.push_str(&i.to_string()),
            (_, _, Some(f)) => out.push_str(&format_float(f)),
            _ => out.push_str("null"),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(x, out);
            }
            out.push(']');
        }
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(&m[k], out);
            }
            out.push('}');
        }
    }
}

pub fn stable_string(v: &impl Serialize) -> String {
    let value = serde_json::to_value(v).expect("value serializes");
    let mut out = String::new();
    write_value(&value, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_nine_digits() {
        assert_eq!(format_float(0.1234567891234), "0.123456789");
        assert_eq!(format_float(1.0), "1.0");
        assert_eq!(format_float(2.0 / 3.0), "0.666666667");
        assert_eq!(format_float(1e-12), "1e-12");
        assert_eq!(format_float(f64::NAN), "null");
    }

    #[test]
    fn keys_are_sorted() {
        let v = serde_json::json!({"b": 1, "a": [0.5, null, "x"], "c": {"z": true, "y": -3}});
        assert_eq!(stable_string(&v), r#"{"a":[0.5,null,"x"],"b":1,"c":{"y":-3,"z":true}}"#);
    }
}
