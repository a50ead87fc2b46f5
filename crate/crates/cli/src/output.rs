//! Rendering of command results as aligned text, CSV or JSON.

use std::io::Write;

use anyhow::Result;
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone)]
pub enum Cell {
    Str(String),
    Int(u64),
    Float(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_owned())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => {
                let a = v.abs();
                if *v == 0.0 {
                    "0".into()
                } else if v.is_infinite() {
                    "inf".into()
                } else if (1e-3..1e6).contains(&a) {
                    format!("{v:.6}")
                } else {
                    format!("{v:.4e}")
                }
            }
        }
    }

    /// Full precision, for machine consumption.
    fn csv(&self) -> String {
        match self {
            Cell::Float(v) if v.is_infinite() => "inf".into(),
            // Shortest round-tripping form; exponent notation away from 1.
            Cell::Float(v) if *v != 0.0 && !(1e-4..1e15).contains(&v.abs()) => format!("{v:e}"),
            Cell::Float(v) => v.to_string(),
            other => other.text(),
        }
    }

    fn numeric(&self) -> bool {
        !matches!(self, Cell::Str(_))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub headers: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(headers: Vec<&'static str>) -> Self {
        Self {
            headers,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    fn render_text(&self, out: &mut impl Write) -> std::io::Result<()> {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(Cell::text).collect())
            .collect();
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([self.headers[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |out: &mut dyn Write, items: &[String], right: &[bool]| -> std::io::Result<()> {
            let parts: Vec<String> = items
                .iter()
                .zip(&widths)
                .zip(right)
                .map(|((s, w), r)| {
                    if *r {
                        format!("{s:>w$}")
                    } else {
                        format!("{s:<w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", parts.join("  ").trim_end())
        };
        let right: Vec<bool> = (0..self.headers.len())
            .map(|i| self.rows.first().is_some_and(|r| r[i].numeric()))
            .collect();
        let headers: Vec<String> = self.headers.iter().map(|h| h.to_string()).collect();
        line(out, &headers, &right)?;
        for row in &cells {
            line(out, row, &right)?;
        }
        Ok(())
    }

    fn render_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A command's result: a JSON document plus the same content as tables and
/// free-form notes for the text form. CSV carries the first table only.
pub struct Report<T: Serialize> {
    pub json: T,
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
}

impl<T: Serialize> Report<T> {
    pub fn emit(&self, format: Format) -> Result<()> {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        match format {
            Format::Json => {
                serde_json::to_writer_pretty(&mut out, &self.json)?;
                writeln!(out)?;
            }
            Format::Csv => {
                if let Some(t) = self.tables.first() {
                    t.render_csv(&mut out)?;
                }
            }
            Format::Text => {
                for (i, t) in self.tables.iter().enumerate() {
                    if i > 0 {
                        writeln!(out)?;
                    }
                    t.render_text(&mut out)?;
                }
                if !self.notes.is_empty() && !self.tables.is_empty() {
                    writeln!(out)?;
                }
                for n in &self.notes {
                    writeln!(out, "{n}")?;
                }
            }
        }
        Ok(())
    }
}
