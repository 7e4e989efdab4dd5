//! Emission of data files: 17-significant-digit floats, CSV tables, JSON
//! documents, and all-or-nothing writes of an artifact set.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::Value;

/// `x` with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        // Avoid "-0.0000000000000000e0" noise.
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

/// Pretty-print a JSON value, writing every float with [`fmt17`].
///
/// Non-finite floats have no JSON form and are written as `null`.
pub fn json_to_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                match n.as_f64() {
                    Some(f) if f.is_finite() => out.push_str(&fmt17(f)),
                    _ => out.push_str("null"),
                }
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else if items.iter().all(|i| !i.is_array() && !i.is_object()) {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(item, indent, out);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (k, item) in items.iter().enumerate() {
                    push_indent(indent + 1, out);
                    write_value(item, indent + 1, out);
                    if k + 1 < items.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                push_indent(indent, out);
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            let len = map.len();
            for (k, (key, item)) in map.iter().enumerate() {
                push_indent(indent + 1, out);
                out.push_str(&Value::String(key.clone()).to_string());
                out.push_str(": ");
                write_value(item, indent + 1, out);
                if k + 1 < len {
                    out.push(',');
                }
                out.push('\n');
            }
            push_indent(indent, out);
            out.push('}');
        }
    }
}

fn push_indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

/// A named file waiting to be written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: Vec<u8>,
}

impl Artifact {
    pub fn new(name: impl Into<String>, contents: impl Into<Vec<u8>>) -> Self {
        Self {
            name: name.into(),
            contents: contents.into(),
        }
    }
}

/// Write every artifact into `dir`, or none of them.
///
/// Each file goes to a temporary name first and is renamed once all writes
/// succeeded; on failure the temporaries and any renamed files are removed.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let result = (|| -> io::Result<()> {
        for a in artifacts {
            let fin = dir.join(&a.name);
            let tmp = dir.join(format!(".{}.partial", a.name));
            staged.push((tmp.clone(), fin));
            fs::write(&tmp, &a.contents)?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    let mut done = Vec::new();
    for (tmp, fin) in &staged {
        if let Err(e) = fs::rename(tmp, fin) {
            for p in &done {
                let _ = fs::remove_file(p);
            }
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            return Err(e);
        }
        done.push(fin.clone());
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt17(1.0), "1.0000000000000000e0");
        assert_eq!(fmt17(-0.0425), "-4.2500000000000003e-2");
        assert_eq!(fmt17(-0.0), "0.0000000000000000e0");
    }

    #[test]
    fn json_layout() {
        let v = json!({"b": [1.5, 2], "a": {"s": "x\"y", "n": null, "t": true}, "m": [[0.5], []]});
        let s = json_to_string(&v);
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["b"][0].as_f64(), Some(1.5));
        assert_eq!(back["b"][1].as_i64(), Some(2));
        assert_eq!(back["a"]["s"], "x\"y");
        assert!(s.contains("1.5000000000000000e0"));
    }

    #[test]
    fn artifacts_land_together() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested");
        let written = write_artifacts(
            &out,
            &[Artifact::new("a.txt", "one"), Artifact::new("b.txt", "two")],
        )
        .unwrap();
        assert_eq!(written.len(), 2);
        assert_eq!(fs::read_to_string(out.join("b.txt")).unwrap(), "two");
        let leftovers: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        // A directory squatting on the second file's temporary name makes its write fail.
        fs::create_dir_all(dir.path().join(".b.txt.partial")).unwrap();
        let err = write_artifacts(
            dir.path(),
            &[Artifact::new("a.txt", "one"), Artifact::new("b.txt", "two")],
        );
        assert!(err.is_err());
        assert!(!dir.path().join("a.txt").exists());
        assert!(!dir.path().join(".a.txt.partial").exists());
    }

    proptest! {
        #[test]
        fn fmt17_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = fmt17(x);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
