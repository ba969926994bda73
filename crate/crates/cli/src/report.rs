//! Report serialization and the output directory writer.

use std::io;
use std::path::{Path, PathBuf};

use serde::ser::Error as _;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

/// A float written with 17 significant digits; non-finite values become `null`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Float(pub f64);

impl Serialize for Float {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return serializer.serialize_none();
        }
        let raw = RawValue::from_string(fmt_float(self.0)).map_err(S::Error::custom)?;
        raw.serialize(serializer)
    }
}

pub fn fl(x: f64) -> Float {
    Float(x)
}

/// Fixed-width scientific notation shared by JSON and CSV output.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        // Normalize -0 so identical runs cannot differ by a sign bit on zero.
        let x = if x == 0.0 { 0.0 } else { x };
        format!("{x:.16e}")
    } else {
        String::new()
    }
}

/// One artifact listed in `manifest.json`.
#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    label: &'a str,
    command: &'a str,
    files: &'a [ManifestEntry],
}

/// Single writer for an output directory; every file goes through it so the
/// manifest is complete.
pub struct OutputDir {
    root: PathBuf,
    label: String,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: &Path, label: &str) -> io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            label: label.to_string(),
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// File name `<label>.<stem>`.
    pub fn name(&self, stem: &str) -> String {
        format!("{}.{stem}", self.label)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> io::Result<PathBuf> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes)?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, stem: &str, value: &T) -> io::Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        bytes.push(b'\n');
        let name = self.name(stem);
        self.write_bytes(&name, &bytes)
    }

    pub fn write_csv(&mut self, stem: &str, table: &Table) -> io::Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&table.header)?;
        for row in &table.rows {
            w.write_record(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| io::Error::other(e.to_string()))?;
        let name = self.name(stem);
        self.write_bytes(&name, &bytes)
    }

    /// Writes `manifest.json` and returns the listed entries.
    pub fn finish(mut self, command: &str) -> io::Result<Vec<ManifestEntry>> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            label: &self.label,
            command,
            files: &self.entries,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?;
        bytes.push(b'\n');
        std::fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(self.entries)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A CSV table assembled in memory.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row.into_iter().map(Cell::render).collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// A CSV cell value.
#[derive(Clone, Debug)]
pub enum Cell {
    F(f64),
    OptF(Option<f64>),
    U(usize),
    S(String),
    B(bool),
}

impl Cell {
    fn render(self) -> String {
        match self {
            Cell::F(x) => fmt_float(x),
            Cell::OptF(x) => x.map(fmt_float).unwrap_or_default(),
            Cell::U(x) => x.to_string(),
            Cell::S(s) => s,
            Cell::B(b) => b.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_digits() {
        let s = serde_json::to_string(&[fl(0.1), fl(-2.5e-300), fl(f64::NAN), fl(-0.0)]).unwrap();
        assert_eq!(
            s,
            "[1.0000000000000001e-1,-2.5000000000000000e-300,null,0.0000000000000000e0]"
        );
        let back: Vec<Option<f64>> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[0], Some(0.1));
        assert_eq!(back[1], Some(-2.5e-300));
        assert_eq!(back[2], None);
    }

    #[test]
    fn float_round_trips_exactly() {
        for x in [1.0 / 3.0, std::f64::consts::PI * 1e17, 5e-324, f64::MAX] {
            assert_eq!(fmt_float(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn manifest_lists_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path(), "m").unwrap();
        out.write_json("a.json", &[fl(1.0)]).unwrap();
        let mut t = Table::new(&["x", "y"]);
        t.push(vec![Cell::F(1.0), Cell::OptF(None)]);
        out.write_csv("b.csv", &t).unwrap();
        let entries = out.finish("run").unwrap();
        assert_eq!(entries.len(), 2);
        for e in &entries {
            let bytes = std::fs::read(dir.path().join(&e.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), e.sha256);
        }
        let text = std::fs::read_to_string(dir.path().join("m.b.csv")).unwrap();
        assert_eq!(text, "x,y\n1.0000000000000000e0,\n");
    }
}
