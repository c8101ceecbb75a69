use std::path::Path;

use super::{DataError, TimeSeriesDataset};
use crate::io::write_atomic;

/// Result of [`load_csv`]: the dataset plus the non-numeric columns that
/// were dropped (timestamps and the like).
#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub dataset: TimeSeriesDataset,
    pub dropped_columns: Vec<String>,
}

/// Map a label cell to 0 (normal) or 1 (anomaly).
///
/// | cell (trimmed, case-insensitive)            | label |
/// |---------------------------------------------|-------|
/// | `0`, `0.0`, `normal`, `false`               | 0     |
/// | `1`, `1.0`, `attack`, `a ttack`, `anomaly`, `true` | 1 |
///
/// `a ttack` is the spelling found in some published SWaT exports.
pub fn parse_label(cell: &str) -> Option<u8> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "0" | "0.0" | "normal" | "false" => Some(0),
        "1" | "1.0" | "attack" | "a ttack" | "anomaly" | "true" => Some(1),
        _ => None,
    }
}

/// Load a headered, comma-separated file.
///
/// A column is numeric when its first data cell parses as a float; every
/// later cell of a numeric column must then parse too. Other columns are
/// dropped and reported in [`CsvLoad::dropped_columns`]. Line numbers in
/// errors are 1-based file lines (the header is line 1).
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<CsvLoad, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            },
            _ => DataError::Csv(e),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::Config(format!("label column '{name}' not found")))?,
        ),
        None => None,
    };
    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    let first = records
        .first()
        .ok_or_else(|| DataError::EmptyResult(format!("{} has no data rows", path.display())))?;

    let mut numeric = Vec::new();
    let mut dropped = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if Some(i) == label_idx {
            continue;
        }
        let cell = first.get(i).unwrap_or("");
        if cell.parse::<f64>().is_ok() {
            numeric.push(i);
        } else {
            dropped.push(h.clone());
        }
    }
    for h in &dropped {
        log::info!("{}: dropping non-numeric column '{h}'", path.display());
    }

    let mut values = Vec::with_capacity(records.len() * numeric.len());
    let mut labels = label_idx.map(|_| Vec::with_capacity(records.len()));
    for (r, rec) in records.iter().enumerate() {
        let line = r + 2;
        for &i in &numeric {
            let cell = rec.get(i).unwrap_or("");
            let v = cell.parse::<f64>().map_err(|_| DataError::Parse {
                row: line,
                column: headers[i].clone(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        if let (Some(li), Some(l)) = (label_idx, labels.as_mut()) {
            let cell = rec.get(li).unwrap_or("");
            l.push(parse_label(cell).ok_or_else(|| DataError::Label {
                row: line,
                value: cell.to_string(),
            })?);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sensor_names = numeric.iter().map(|&i| headers[i].clone()).collect();
    Ok(CsvLoad {
        dataset: TimeSeriesDataset::new(name, sensor_names, values, labels)?,
        dropped_columns: dropped,
    })
}

/// Write a dataset in the format [`load_csv`] reads; labels, if present,
/// go in a trailing `label_column` with values 0/1.
pub fn write_csv(ds: &TimeSeriesDataset, path: &Path, label_column: &str) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = ds.sensor_names().iter().map(String::as_str).collect();
    if ds.labels().is_some() {
        header.push(label_column);
    }
    w.write_record(&header)?;
    let mut cells = Vec::with_capacity(header.len());
    for r in 0..ds.rows() {
        cells.clear();
        cells.extend(ds.row(r).iter().map(|v| v.to_string()));
        if let Some(l) = ds.labels() {
            cells.push(l[r].to_string());
        }
        w.write_record(&cells)?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e.into_error(),
    })?;
    write_atomic(path, &bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
