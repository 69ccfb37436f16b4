//! Metadata blocks and the file writers used by every command.
//!
//! CSV files start with `# key = value` lines; JSON files carry the same
//! entries under `"metadata"`. Floats are written with 17 significant
//! digits in both.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::ser::{Serialize, SerializeMap, Serializer};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;
use spn_bloch::assembly::T_MODEL;
use spn_bloch::report::fmt_f64;

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    entries: Vec<(String, Value)>,
}

impl Metadata {
    /// The entries shared by every output of `command`.
    pub fn new(command: &str, cfg: &RunConfig, dim: usize) -> Self {
        let t = &cfg.tolerances;
        let mut m = Self { entries: Vec::new() };
        m.push("command", command);
        m.push("config_sha256", cfg.hash());
        m.push("N", cfg.basis.cutoff);
        m.push("L", cfg.grid.l);
        m.push("dim", dim);
        m.push("seed", cfg.seed);
        m.push("T_model", T_MODEL);
        m.push("flat_tol", t.flat_tol);
        m.push("grad_tol", t.grad_tol);
        m.push("hess_tol", t.hess_tol);
        m.push("tol_psd", t.tol_psd);
        m.push("jellium_tol", t.jellium_tol);
        m.push("jellium_radius", t.jellium_radius);
        m.push("wiener_tol", t.wiener_tol);
        m.push("lattice_radius", cfg.lattice.radius);
        m.push("delta_min", cfg.lattice.delta_min);
        m.push("jellium", cfg.lattice.jellium);
        m
    }

    pub fn push(&mut self, key: &str, value: impl Into<Value>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn write_header<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "# {k} = {}", render(v))?;
        }
        Ok(())
    }
}

impl Serialize for Metadata {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Number(n) if n.is_f64() => fmt_f64(n.as_f64().unwrap_or(f64::NAN)),
        Value::Null => "none".into(),
        other => other.to_string(),
    }
}

/// Pretty JSON with every float in `{:.16e}` form.
struct FixedFloats(PrettyFormatter<'static>);

impl Formatter for FixedFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
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

pub fn to_json<T: Serialize>(value: &T) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloats(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(io::Error::other)?;
    buf.push(b'\n');
    Ok(buf)
}

/// Creates files under the output directory.
#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// A CSV file: the metadata header, then whatever `body` writes.
    pub fn csv(
        &self,
        name: &str,
        meta: &Metadata,
        body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
    ) -> io::Result<PathBuf> {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        meta.write_header(&mut w)?;
        body(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    /// A JSON object `{"metadata": ..., <fields of body>}`.
    pub fn json(&self, name: &str, meta: &Metadata, body: impl Serialize) -> io::Result<PathBuf> {
        let mut value = serde_json::to_value(body).map_err(io::Error::other)?;
        let map = value
            .as_object_mut()
            .ok_or_else(|| io::Error::other("report body must be an object"))?;
        let mut out = serde_json::Map::new();
        out.insert("metadata".into(), serde_json::to_value(meta).map_err(io::Error::other)?);
        out.append(map);
        let path = self.path(name);
        std::fs::write(&path, to_json(&out)?)?;
        Ok(path)
    }

    pub fn text(&self, name: &str, text: &str) -> io::Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        let text = String::from_utf8(to_json(&serde_json::json!({"a": 0.1, "b": [1.0, -2.5e-300], "n": 3})).unwrap()).unwrap();
        assert!(text.contains("\"a\": 1.0000000000000001e-1"), "{text}");
        assert!(text.contains("-2.5000000000000000e-300"));
        assert!(text.contains("\"n\": 3"));
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn header_lists_every_entry() {
        let meta = Metadata::new("check", &RunConfig::default(), 10);
        let mut buf = Vec::new();
        meta.write_header(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().all(|l| l.starts_with("# ")));
        assert!(text.contains("# T_model = T1+T2, O(e^4) dropped\n"));
        assert!(text.contains("# flat_tol = 9.9999999999999995e-7\n"));
        assert!(text.contains("# N = 2\n"));
        assert_eq!(text.lines().count(), meta.entries.len());
    }

    #[test]
    fn non_finite_floats_become_null() {
        let text = String::from_utf8(to_json(&[f64::INFINITY]).unwrap()).unwrap();
        assert!(text.contains("null"));
    }
}
