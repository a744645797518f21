//! CSV, PGM and JSON file formats.
//!
//! Sequences: one row per time step, comma-separated decimals, optional
//! leading header lines starting with `#`. Matrices: one CSV row per matrix
//! row. Numbers are written with 17 significant digits so files re-parse to
//! identical bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seqcore::{FeatureSequence, Modality};

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn rows_to_csv<'a>(rows: impl Iterator<Item = &'a [f64]>) -> String {
    let mut out = String::new();
    for row in rows {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{}", format_f64(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    rows_to_csv((0..m.rows()).map(|i| m.row(i)))
}

pub fn sequence_to_csv(seq: &FeatureSequence) -> String {
    rows_to_csv(seq.items().iter().map(Vec::as_slice))
}

fn parse_rows(text: &str, path: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    let mut width = None;
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split(',')
            .map(|field| {
                let field = field.trim();
                field.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_string(),
                    line: line_no,
                    message: format!("row {line_no}: cannot parse '{field}' as a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no,
                message: format!("row {line_no}: non-finite value {v}"),
            });
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no,
                    message: format!("row {line_no}: expected {w} fields, found {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}

pub fn parse_matrix_csv(text: &str, path: &str) -> Result<Matrix> {
    Matrix::from_rows(parse_rows(text, path)?)
}

pub fn parse_sequence_csv(text: &str, path: &str, modality: Modality) -> Result<FeatureSequence> {
    FeatureSequence::new(parse_rows(text, path)?, modality)
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, &path.display().to_string())
}

pub fn read_sequence_csv(path: impl AsRef<Path>, modality: Modality) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence_csv(&text, &path.display().to_string(), modality)
}

/// Binary 8-bit PGM (P5), linear min-max scaling, first matrix row at the top.
/// A constant matrix maps to all zeros.
pub fn matrix_to_pgm(m: &Matrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    let (lo, hi) = m.min_max().unwrap_or((0.0, 0.0));
    let span = hi - lo;
    out.extend(m.as_slice().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
