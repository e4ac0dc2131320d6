//! Comma-separated numeric tables with an optional header row.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

use super::{FeatureKind, LabeledDataset};

/// Which column, if any, holds integer labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Last,
    Index(usize),
}

struct Table {
    rows: Vec<Vec<String>>,
    lines: Vec<u64>,
}

fn parse_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads every record, dropping the first when it is not entirely numeric.
fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut first = true;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        let fields: Vec<String> = rec.iter().map(str::to_owned).collect();
        let is_header = first && fields.iter().any(|f| f.parse::<f64>().is_err());
        first = false;
        if !is_header {
            rows.push(fields);
            lines.push(line);
        }
    }
    if let Some(first) = rows.first() {
        let width = first.len();
        for (r, &line) in rows.iter().zip(&lines) {
            if r.len() != width {
                return Err(parse_err(path, line, format!("expected {width} fields, found {}", r.len())));
            }
        }
    }
    Ok(Table { rows, lines })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

fn parse_label(s: &str) -> Option<usize> {
    s.parse::<usize>().ok().or_else(|| {
        let v = s.parse::<f64>().ok()?;
        (v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64).then_some(v as usize)
    })
}

/// Real-valued features, optionally with one integer label column.
pub fn load_csv(path: &Path, label_column: Option<LabelColumn>) -> Result<LabeledDataset> {
    let table = read_table(path)?;
    let Some(first) = table.rows.first() else {
        return Err(parse_err(path, 1, "no data rows"));
    };
    let width = first.len();
    let label_idx = match label_column {
        None => None,
        Some(LabelColumn::Last) => Some(width - 1),
        Some(LabelColumn::Index(i)) if i < width => Some(i),
        Some(LabelColumn::Index(i)) => {
            return Err(parse_err(path, table.lines[0], format!("label column {i} out of range for {width} fields")))
        }
    };
    let d = width - label_idx.map_or(0, |_| 1);
    if d == 0 {
        return Err(parse_err(path, table.lines[0], "no feature columns"));
    }
    let mut data = Vec::with_capacity(table.rows.len() * d);
    let mut labels = Vec::new();
    for (row, &line) in table.rows.iter().zip(&table.lines) {
        for (j, cell) in row.iter().enumerate() {
            if Some(j) == label_idx {
                let l = parse_label(cell).ok_or_else(|| parse_err(path, line, format!("label {cell:?} is not a non-negative integer")))?;
                labels.push(l);
            } else {
                let v: f64 = cell.parse().map_err(|_| parse_err(path, line, format!("field {} ({cell:?}) is not numeric", j + 1)))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("field {} is not finite", j + 1)));
                }
                data.push(v);
            }
        }
    }
    let features = Tensor::matrix(table.rows.len(), d, data)?;
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    LabeledDataset::new(features, label_idx.map(|_| labels), FeatureKind::Real, name)
}

/// One label per row, single column, optional header.
pub fn load_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let table = read_table(path)?;
    table
        .rows
        .iter()
        .zip(&table.lines)
        .map(|(row, &line)| {
            if row.len() != 1 {
                return Err(parse_err(path, line, format!("expected one field, found {}", row.len())));
            }
            parse_label(&row[0]).ok_or_else(|| parse_err(path, line, format!("label {:?} is not a non-negative integer", row[0])))
        })
        .collect()
}

/// Writes a matrix with shortest round-trip formatting.
pub fn write_matrix_csv(t: &Tensor, header: Option<&[String]>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| csv_error(path, e))?;
    }
    for i in 0..t.rows() {
        w.write_record(t.row(i).iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Features followed by a `label` column when labels are present.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &ds.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_labels_csv(labels: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["label"]).map_err(|e| csv_error(path, e))?;
    for l in labels {
        w.write_record([l.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}
