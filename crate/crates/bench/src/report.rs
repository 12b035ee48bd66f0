//! Output formatting: every float leaves the program with 9 significant digits.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{io_err, Result};

/// Rounds to 9 significant digits; non-finite values pass through.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Text form of [`round9`]: plain decimals in `[1e-4, 1e15)`, scientific otherwise.
pub fn fmt9(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round9(x);
    let a = r.abs();
    if r != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{r:e}")
    } else {
        format!("{r}")
    }
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round9(n.as_f64().expect("f64 number"));
            *v = serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number);
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with floats rounded to 9 significant digits. Non-finite
/// values become `null`.
pub fn to_json_string<S: Serialize>(value: &S) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// RFC 4180 CSV from a header and pre-formatted cells.
pub fn to_csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_digits() {
        assert_eq!(fmt9(0.1), "0.1");
        assert_eq!(fmt9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt9(123456789.123), "123456789");
        assert_eq!(fmt9(2.0f64.sqrt() * 1e-7), "1.41421356e-7");
        assert_eq!(fmt9(f64::INFINITY), "inf");
        assert_eq!(fmt9(0.0), "0");
    }

    #[test]
    fn json_floats_are_rounded() {
        let s = to_json_string(&serde_json::json!({"a": [1.0f64 / 3.0], "b": 2, "c": f64::NAN})).unwrap();
        assert!(s.contains("0.333333333"));
        assert!(!s.contains("0.3333333333"));
        assert!(s.contains("\"c\": null"));
    }

    #[test]
    fn csv_quotes_fields() {
        let s = to_csv_string(&["a", "b"], &[vec!["x,y".into(), "q\"".into()]]).unwrap();
        assert_eq!(s, "a,b\r\n\"x,y\",\"q\"\"\"\r\n");
    }
}
