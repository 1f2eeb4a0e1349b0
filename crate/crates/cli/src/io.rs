//! CSV ingestion and artifact writing.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use agp_core::ChainRecord;
use nalgebra::{DMatrix, DVector};

use crate::error::{usage, Result};

/// A headered numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Columns `cols` as an `n x cols.len()` matrix.
    pub fn matrix(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), cols.len(), |i, j| self.rows[i][cols[j]])
    }
}

/// Reads a headered CSV. Rows are numbered as in the file (header is row 1).
pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let bad = |e: csv::Error| usage(format!("{}: malformed CSV: {e}", path.display()));
    let names: Vec<String> = reader.headers().map_err(bad)?.iter().map(String::from).collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(usage(format!("{}: missing header row", path.display())));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(bad)?;
        let row_no = i + 2;
        let row = record
            .iter()
            .zip(&names)
            .map(|(cell, name)| {
                if cell.is_empty() {
                    return Err(usage(format!(
                        "{}: missing value at row {row_no}, column '{name}'",
                        path.display()
                    )));
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(usage(format!(
                        "{}: non-numeric value '{cell}' at row {row_no}, column '{name}'",
                        path.display()
                    ))),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { names, rows })
}

/// Splits predictors from the response (default: the last column).
pub fn split_response(
    table: &Table,
    response: Option<&str>,
) -> Result<(Vec<String>, DMatrix<f64>, DVector<f64>, String)> {
    let r = match response {
        Some(name) => table.column(name).ok_or_else(|| {
            usage(format!(
                "response column '{name}' not found (columns: {})",
                table.names.join(", ")
            ))
        })?,
        None => table.names.len() - 1,
    };
    let cols: Vec<usize> = (0..table.names.len()).filter(|&j| j != r).collect();
    if table.rows.len() < 2 || cols.len() < 2 {
        return Err(usage(format!(
            "need at least 2 rows and 2 predictors, got {} rows and {} predictors",
            table.rows.len(),
            cols.len()
        )));
    }
    let names = cols.iter().map(|&j| table.names[j].clone()).collect();
    let y = DVector::from_iterator(table.rows.len(), table.rows.iter().map(|row| row[r]));
    Ok((names, table.matrix(&cols), y, table.names[r].clone()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes a headered CSV; values use the shortest round-tripping form.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::CliError {
    std::io::Error::other(e).into()
}

/// Writes the predictors and response as a headered CSV.
pub fn write_dataset(
    path: &Path,
    names: &[String],
    response: &str,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<()> {
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push(response);
    let rows = (0..x.nrows()).map(|i| {
        x.row(i)
            .iter()
            .chain(std::iter::once(&y[i]))
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
    });
    write_csv(path, &header, rows)
}

pub fn write_chain(path: &Path, records: &[ChainRecord]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_chain(path: &Path) -> Result<Vec<ChainRecord>> {
    let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| usage(format!("{}:{}: bad chain record: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    Ok(records)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
