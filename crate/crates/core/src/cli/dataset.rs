//! Numeric CSV tables in and out.
//!
//! Input files are comma-separated with an optional header row. When the
//! header flag is not forced, the first row is a header exactly when one of
//! its cells does not parse as a number. Every other cell must be a finite
//! number; the first offending cell is reported as `file:line`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::points::Points;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub values: Points,
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a CSV table of finite numbers.
pub fn read_table(path: &Path, header: Option<bool>) -> Result<Table> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_table(&bytes, &path.display().to_string(), header)
}

/// Parses CSV bytes; `origin` names the source in diagnostics.
pub fn parse_table(bytes: &[u8], origin: &str, header: Option<bool>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut names = None;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(index as u64 + 1);
            Error::parse(format!("{origin}:{line}"), e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(index as u64 + 1);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let is_header = index == 0 && header.unwrap_or_else(|| record.iter().any(|c| parse_cell(c).is_none()));
        if is_header {
            names = Some(record.iter().map(str::to_string).collect());
            cols = Some(record.len());
            continue;
        }
        if let Some(c) = cols {
            if record.len() != c {
                return Err(Error::parse(
                    format!("{origin}:{line}"),
                    format!("expected {c} columns, found {}", record.len()),
                ));
            }
        }
        cols = Some(record.len());
        for (j, cell) in record.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| {
                Error::parse(
                    format!("{origin}:{line}"),
                    format!("column {}: {cell:?} is not a finite number", j + 1),
                )
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(origin, "no data rows"));
    }
    Ok(Table {
        header: names,
        values: Points::from_vec(rows, cols.unwrap_or(0), data)?,
    })
}

/// Splits a table into predictors and its trailing `response_columns` responses.
pub fn split_responses(table: &Points, response_columns: usize, origin: &str) -> Result<(Points, Points)> {
    let d = table.dim();
    if response_columns == 0 || response_columns >= d {
        return Err(Error::parse(
            origin,
            format!("{d} columns cannot hold at least one predictor and {response_columns} responses"),
        ));
    }
    let dx = d - response_columns;
    let x: Vec<usize> = (0..dx).collect();
    let y: Vec<usize> = (dx..d).collect();
    Ok((select_columns(table, &x), select_columns(table, &y)))
}

fn select_columns(p: &Points, cols: &[usize]) -> Points {
    let data = p.rows().flat_map(|r| cols.iter().map(move |&j| r[j])).collect();
    Points::from_vec(p.len(), cols.len(), data).expect("column selection keeps the shape")
}

/// Reads a training-style file: predictors followed by `response_columns` responses.
pub fn read_dataset(path: &Path, response_columns: usize, header: Option<bool>) -> Result<(Points, Points)> {
    let t = read_table(path, header)?;
    split_responses(&t.values, response_columns, &path.display().to_string())
}

/// CSV with a header row, `,` separators, `.` decimals and LF endings.
/// Values use the shortest representation that parses back to the same bits.
pub fn csv_bytes(header: &[String], values: &Points) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("formatting CSV: {e}"));
    w.write_record(header).map_err(err)?;
    for row in values.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("formatting CSV: {e}")))
}

/// Column names `y` for one response, `y1, y2, ...` otherwise.
pub fn response_header(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["y".into()]
    } else {
        (1..=dim).map(|j| format!("y{j}")).collect()
    }
}

/// Writes the whole file in one call once its contents are complete.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
