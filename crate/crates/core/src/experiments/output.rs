//! Result files: CSV tables with `#` metadata, atomic writes, checksums and
//! gnuplot-ready curve data.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// 17 significant digits, which round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(if v { "true" } else { "false" }.into())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub name: String,
    pub meta: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), ..Default::default() }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (k, v) in &self.meta {
            writeln!(out, "# {k}: {v}")?;
        }
        {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
            let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
            w.write_record(&self.header).map_err(io)?;
            for r in &self.rows {
                w.write_record(r.iter().map(Cell::render)).map_err(io)?;
            }
            w.flush()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<Artifact> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().ok_or_else(|| Error::Invalid(format!("no file name in {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(Artifact { path: path.to_path_buf(), sha256: sha256_hex(bytes), bytes: bytes.len() })
}

/// Two-column series for plotting.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn new(name: &str, x_label: &str, y_label: &str, points: Vec<(f64, f64)>) -> Self {
        Curve { name: name.into(), x_label: x_label.into(), y_label: y_label.into(), log_y: false, points }
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    fn data(&self, source: &str) -> String {
        let mut s = format!("# curve: {}\n# source: {source}\n# columns: {} {}\n", self.name, self.x_label, self.y_label);
        for (x, y) in &self.points {
            s.push_str(&format!("{} {}\n", fmt_f64(*x), fmt_f64(*y)));
        }
        s
    }
}

/// One `.dat` file per curve under `dir/plot`, plus a gnuplot script that
/// plots each of them. Nothing is rendered.
pub fn emit_plot_data(dir: &Path, source: &str, curves: &[Curve]) -> Result<Vec<Artifact>> {
    let plot_dir = dir.join("plot");
    let mut out = Vec::new();
    let mut script = String::from("# gnuplot script; run `gnuplot -p plot.gp` in this directory\nset key left top\n");
    for c in curves {
        let file = format!("{}.dat", c.name);
        out.push(write_atomic(&plot_dir.join(&file), c.data(source).as_bytes())?);
        script.push_str(&format!(
            "set title '{}'\nset xlabel '{}'\nset ylabel '{}'\n{}plot '{}' using 1:2 with linespoints title '{}'\n{}pause -1\n",
            c.name,
            c.x_label,
            c.y_label,
            if c.log_y { "set logscale y\n" } else { "" },
            file,
            c.y_label,
            if c.log_y { "unset logscale y\n" } else { "" },
        ));
    }
    if !curves.is_empty() {
        out.push(write_atomic(&plot_dir.join("plot.gp"), script.as_bytes())?);
    }
    Ok(out)
}
