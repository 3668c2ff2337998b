//! Plain-text data exchange: header-less numeric CSV matrices, predictor
//! directories (`X_1.csv`, `X_2.csv`, ...), and TOML documents.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Every number written to disk carries 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&x| fmt_f64(x)))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match ncols {
            None => ncols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("row {} has {} fields, expected {c}", i + 1, record.len()),
                })
            }
            _ => {}
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                message: format!("row {}, column {}: cannot parse {field:?} as a number", i + 1, k + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("row {}, column {}: non-finite value", i + 1, k + 1),
                });
            }
            data.push(v);
        }
        nrows += 1;
    }
    let ncols = ncols.unwrap_or(0);
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

pub fn write_vector_csv(path: &Path, v: &DVector<f64>) -> Result<()> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    write_matrix_csv(path, &m)
}

/// A single-column CSV.
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() != 1 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected one column, found {}", m.ncols()),
        });
    }
    Ok(m.column(0).into_owned())
}

pub fn predictor_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("X_{j}.csv"))
}

/// Writes `X_1.csv ... X_p.csv`; predictor ids are 1-based.
pub fn write_predictors(dir: &Path, predictors: &[DMatrix<f64>]) -> Result<()> {
    ensure_dir(dir)?;
    for (j, x) in predictors.iter().enumerate() {
        write_matrix_csv(&predictor_path(dir, j + 1), x)?;
    }
    Ok(())
}

/// Reads `X_1.csv, X_2.csv, ...` until the first missing index. All files
/// must share one shape.
pub fn read_predictors(dir: &Path) -> Result<Vec<DMatrix<f64>>> {
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    loop {
        let path = predictor_path(dir, out.len() + 1);
        if !path.exists() {
            break;
        }
        let x = read_matrix_csv(&path)?;
        if let Some(first) = out.first() {
            if first.shape() != x.shape() {
                return Err(Error::Parse {
                    path,
                    message: format!(
                        "shape {}x{} differs from X_1.csv ({}x{})",
                        x.nrows(),
                        x.ncols(),
                        first.nrows(),
                        first.ncols()
                    ),
                });
            }
        }
        out.push(x);
    }
    if out.is_empty() {
        return Err(Error::io(
            predictor_path(dir, 1),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no predictor files found"),
        ));
    }
    Ok(out)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &text)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV with a header row; every row must have as many fields as the header.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
