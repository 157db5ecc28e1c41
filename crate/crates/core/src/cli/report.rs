//! Report serialization. Floats are written as `{:.16e}` (17 significant digits, exact
//! round trip); non-finite values become `null`.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

pub const SCHEMA: &str = "qcrit-report v1";

struct SciFormatter<'a>(PrettyFormatter<'a>);

// serde_json routes non-finite floats to `write_null` before reaching the formatter
fn write_float<W: ?Sized + Write>(w: &mut W, v: f64) -> io::Result<()> {
    write!(w, "{v:.16e}")
}

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write_float(w, v)
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write_float(w, v as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("report values serialize");
    out.push(b'\n');
    String::from_utf8(out).expect("utf-8 json")
}

/// SHA-256 of the canonical TOML rendering of the merged config.
pub fn config_hash(table: &toml::Table) -> String {
    let text = toml::to_string(table).unwrap_or_default();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Two-column CSV trace with a header line.
pub fn trace_csv(header: [&str; 2], rows: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut s = format!("{},{}\n", header[0], header[1]);
    for (a, b) in rows {
        s.push_str(&format!("{a:.16e},{b:.16e}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct T {
        a: f64,
        b: Vec<f64>,
        n: usize,
    }

    #[test]
    fn floats_in_scientific_notation() {
        let s = to_json(&T { a: 0.1, b: vec![f64::INFINITY, -2.0], n: 3 });
        assert!(s.contains("1.0000000000000001e-1"));
        assert!(s.contains("null"));
        assert!(s.contains("-2.0000000000000000e0"));
        assert!(s.contains("\"n\": 3"));
        let back: f64 = "1.0000000000000001e-1".parse().unwrap();
        assert_eq!(back, 0.1);
    }

    #[test]
    fn hash_is_stable() {
        let t: toml::Table = toml::from_str("seed = 1\n[domain]\ndim = 1\n").unwrap();
        assert_eq!(config_hash(&t), config_hash(&t.clone()));
        assert_eq!(config_hash(&t).len(), 64);
    }
}
