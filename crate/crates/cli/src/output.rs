//! Tabular results, CSV/JSON rendering and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::{Config, Format};
use crate::CliError;

/// Significant digits of every float written to a result file.
pub const SIG_DIGITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Num(x) => fmt_sig(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) => round_sig(*x)
                .and_then(serde_json::Number::from_f64)
                .map_or(Value::Null, Value::Number),
            Cell::Int(i) => Value::from(*i),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Empty => Value::Null,
        }
    }
}

/// `x` with `SIG_DIGITS` significant digits in the shortest plain form.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..SIG_DIGITS as i32).contains(&exp) {
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn round_sig(x: f64) -> Option<f64> {
    x.is_finite().then(|| fmt_sig(x).parse().expect("formatted float parses"))
}

/// A result table with a fixed column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub experiment: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(experiment: &'static str, columns: &[&'static str]) -> Self {
        Self {
            experiment,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> Result<Vec<u8>, CliError> {
        match format {
            Format::Csv => self.csv(),
            Format::Json => self.json(),
        }
    }

    fn csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let io = |e: csv::Error| CliError::Io(format!("writing csv: {e}"));
        w.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::text)).map_err(io)?;
        }
        w.into_inner().map_err(|e| CliError::Io(format!("writing csv: {e}")))
    }

    fn json(&self) -> Result<Vec<u8>, CliError> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> = self.columns.iter().zip(row).map(|(c, v)| (c.to_string(), v.json())).collect();
                Value::Object(obj)
            })
            .collect();
        let mut doc = Map::new();
        doc.insert("experiment".into(), Value::String(self.experiment.into()));
        doc.insert("rows".into(), Value::Array(rows));
        let mut out = serde_json::to_vec_pretty(&Value::Object(doc)).map_err(|e| CliError::Io(format!("writing json: {e}")))?;
        out.push(b'\n');
        Ok(out)
    }
}

/// Timing of one labelled unit of work.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a result file.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub experiment: &'a str,
    pub library_version: &'a str,
    pub seed: u64,
    pub format: Format,
    pub output: Option<String>,
    pub wall_time_seconds: f64,
    pub timings: Vec<Timing>,
    pub config: &'a Config,
}

/// `<out>.manifest.json` next to the result file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes the result and its manifest; without a path the result goes to stdout
/// and the manifest to stderr.
pub fn emit(out: Option<&Path>, body: &[u8], manifest: &Manifest) -> Result<(), CliError> {
    let mut m = serde_json::to_vec_pretty(manifest).map_err(|e| CliError::Io(format!("writing manifest: {e}")))?;
    m.push(b'\n');
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
            }
            std::fs::write(path, body).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
            let mp = manifest_path(path);
            std::fs::write(&mp, m).map_err(|e| CliError::Io(format!("writing {}: {e}", mp.display())))?;
        }
        None => {
            std::io::stdout()
                .write_all(body)
                .map_err(|e| CliError::Io(format!("writing stdout: {e}")))?;
            std::io::stderr()
                .write_all(&m)
                .map_err(|e| CliError::Io(format!("writing stderr: {e}")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_significant_digits() {
        assert_eq!(fmt_sig(0.3452380952380952), "0.3452380952");
        assert_eq!(fmt_sig(-0.25450012345678), "-0.2545001235");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(123456.789012345), "123456.789");
        assert_eq!(fmt_sig(1.5e-10), "1.5e-10");
        assert_eq!(fmt_sig(2.0e12), "2e12");
        assert_eq!(fmt_sig(f64::NAN), "nan");
    }

    #[test]
    fn csv_uses_unix_newlines() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![Cell::Num(0.1), Cell::Empty]);
        let s = String::from_utf8(t.render(Format::Csv).unwrap()).unwrap();
        assert_eq!(s, "a,b\n0.1,\n");
    }

    #[test]
    fn json_keeps_column_order() {
        let mut t = Table::new("x", &["z", "a"]);
        t.push(vec![Cell::Num(1.0 / 3.0), Cell::Text("k".into())]);
        let s = String::from_utf8(t.render(Format::Json).unwrap()).unwrap();
        assert!(s.find("\"z\"").unwrap() < s.find("\"a\"").unwrap());
        assert!(s.contains("0.3333333333"));
    }
}
