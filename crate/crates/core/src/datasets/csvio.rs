use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Reads a headed, comma-separated file of numeric features and an integer
/// label. The label is the last column unless `label_column` names another.
///
/// Row numbers in errors count data rows from 1 (the header is row 0).
pub fn load_csv(path: &Path, label_column: Option<&str>, class_count: usize) -> Result<Dataset> {
    let row_err = |row: usize, msg: String| Error::Row {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least one feature column and a label column",
            path.display()
        )));
    }
    let label_idx = match label_column {
        None => headers.len() - 1,
        Some(name) => headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{}: no column named {name:?}", path.display())))?,
    };

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(row_err(
                row,
                format!("{} fields, header has {}", record.len(), headers.len()),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| row_err(row, format!("column {j}: non-numeric value {cell:?}")))?;
            if !v.is_finite() {
                return Err(row_err(row, format!("column {j}: non-finite value {cell:?}")));
            }
            if j == label_idx {
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(row_err(row, format!("label {cell:?} is not a non-negative integer")));
                }
                let y = v as usize;
                if y >= class_count {
                    return Err(row_err(row, format!("label {y} out of range for {class_count} classes")));
                }
                labels.push(y);
            } else {
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let d = headers.len() - 1;
    Dataset::new(Tensor::matrix(labels.len(), d, values)?, labels, class_count)
}

/// Writes `f0,...,f{d-1},label` with round-trip exact float formatting.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    let d = data.dims();
    let header: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..data.len() {
        for v in data.features().row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&data.labels()[i].to_string());
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}
