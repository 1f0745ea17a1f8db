// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal CSV tables: header row, comma separated, LF line endings, reals
//! printed with six significant digits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Real(f64),
    Bool(bool),
}

impl Cell {
    pub fn as_real(&self) -> Option<f64> {
        match *self {
            Cell::Real(x) => Some(x),
            Cell::Int(i) => Some(i as f64),
            _ => None,
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Text(s) => quote(s),
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => format_real(*x),
            Cell::Bool(b) => b.to_string(),
        }
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

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `%.6g`-style formatting: six significant digits, trailing zeros trimmed,
/// scientific notation outside `1e-5 ≤ |x| < 1e6`.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        trim_zeros(format!("{x:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Contract(format!(
                "CSV row has {} cells, header has {}",
                row.len(),
                self.header.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.header.iter().map(|h| quote(h)).collect();
        let _ = writeln!(out, "{}", header.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Writes `<dir>/<experiment>-<config_hash>.csv`.
    pub fn write(&self, dir: &Path, experiment: &str, config_hash: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{experiment}-{config_hash}.csv"));
        write_atomic(&path, self.render().as_bytes())?;
        Ok(path)
    }

    /// Parses text produced by [`CsvTable::render`]. Every non-header cell
    /// comes back as text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = split_line(lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?)?;
        let mut table = CsvTable::new(header);
        for line in lines.filter(|l| !l.is_empty()) {
            let row = split_line(line)?.into_iter().map(Cell::Text).collect();
            table.push(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(table)
    }

    /// Cell of `row` in column `name` read as a number.
    pub fn real(&self, row: usize, name: &str) -> Option<f64> {
        let cell = self.rows.get(row)?.get(self.column(name)?)?;
        match cell {
            Cell::Text(s) => s.parse().ok(),
            other => other.as_real(),
        }
    }

    pub fn text(&self, row: usize, name: &str) -> Option<String> {
        let cell = self.rows.get(row)?.get(self.column(name)?)?;
        Some(match cell {
            Cell::Text(s) => s.clone(),
            other => other.render(),
        })
    }
}

fn split_line(line: &str) -> Result<Vec<String>> {
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => cells.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::Format(format!("unterminated quote in CSV line {line:?}")));
    }
    cells.push(cur);
    Ok(cells)
}
