//! CSV and fingerprint helpers shared by the command-line tools.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::bayes::BayesState;
use crate::error::{MklError, Result};
use crate::gram::DataMatrix;
use crate::solver::FitTrace;

/// Column holding the targets when the file has a header.
pub const LABEL_COLUMN: &str = "y";
/// Optional column with 1-based task ids.
pub const TASK_COLUMN: &str = "task";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Whether a label column must be present.
    pub require_labels: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { has_header: true, require_labels: true }
    }
}

/// Features, optional targets and optional task ids read from a table.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: DataMatrix,
    pub labels: Option<DVector<f64>>,
    pub feature_names: Vec<String>,
}

fn parse_cell(s: &str, line: u64, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| MklError::InvalidData(format!("line {line}, column {col}: cannot parse {s:?} as a number")))
}

/// Read a data table.
///
/// With a header, the `y` column holds targets, an optional `task` column
/// holds 1-based task ids and every other column is a feature. Without a
/// header the first column is the target (when labels are required) and the
/// rest are features.
pub fn read_dataset<R: Read>(reader: R, opts: CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(opts.has_header).trim(csv::Trim::All).from_reader(reader);
    let (label_idx, task_idx, names): (Option<usize>, Option<usize>, Vec<String>) = if opts.has_header {
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let label = header.iter().position(|h| h == LABEL_COLUMN);
        if opts.require_labels && label.is_none() {
            return Err(MklError::InvalidData(format!("line 1: header has no {LABEL_COLUMN:?} column")));
        }
        let task = header.iter().position(|h| h == TASK_COLUMN);
        (label, task, header)
    } else {
        (if opts.require_labels { Some(0) } else { None }, None, Vec::new())
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut tasks = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    let mut feature_names = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let width = record.len();
        if !names.is_empty() && width != names.len() {
            return Err(MklError::InvalidData(format!("line {line}: expected {} fields, found {width}", names.len())));
        }
        let mut row = Vec::with_capacity(width);
        for (j, cell) in record.iter().enumerate() {
            let col = names.get(j).cloned().unwrap_or_else(|| (j + 1).to_string());
            if Some(j) == label_idx {
                labels.push(parse_cell(cell, line, &col)?);
            } else if Some(j) == task_idx {
                let t = parse_cell(cell, line, &col)?;
                if t < 1.0 || t.fract() != 0.0 {
                    return Err(MklError::InvalidData(format!("line {line}: task id must be a positive integer, got {cell}")));
                }
                tasks.push(t as usize - 1);
            } else {
                if nrows == 0 {
                    feature_names.push(col.clone());
                }
                row.push(parse_cell(cell, line, &col)?);
            }
        }
        match ncols {
            None => ncols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(MklError::InvalidData(format!("line {line}: expected {c} features, found {}", row.len())));
            }
            _ => {}
        }
        values.extend(row);
        nrows += 1;
    }
    if nrows == 0 {
        return Err(MklError::InvalidData("data file has no rows".into()));
    }
    let mut features = DataMatrix::from_flat(nrows, ncols.unwrap_or(0), values)?;
    if task_idx.is_some() {
        features = features.with_tasks(tasks)?;
    }
    let labels = label_idx.map(|_| DVector::from_vec(labels));
    Ok(Dataset { features, labels, feature_names })
}

pub fn read_dataset_file(path: &Path, opts: CsvOptions) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| with_path(e, path))?;
    read_dataset(f, opts).map_err(|e| match e {
        MklError::InvalidData(msg) => MklError::InvalidData(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn with_path(e: std::io::Error, path: &Path) -> MklError {
    MklError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// A headerless numeric matrix (Gram matrices and cross-Gram rows).
pub fn read_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .enumerate()
            .map(|(j, c)| parse_cell(c, line, &(j + 1).to_string()))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(MklError::InvalidData(format!("line {line}: expected {} values, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn read_matrix_file(path: &Path) -> Result<DMatrix<f64>> {
    let f = std::fs::File::open(path).map_err(|e| with_path(e, path))?;
    read_matrix(f).map_err(|e| match e {
        MklError::InvalidData(msg) => MklError::InvalidData(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_matrix<W: Write>(writer: W, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 over shape, values and task ids, hex encoded.
pub fn fingerprint(data: &DataMatrix) -> String {
    let mut h = Sha256::new();
    h.update((data.nrows() as u64).to_le_bytes());
    h.update((data.ncols() as u64).to_le_bytes());
    for v in data.values() {
        h.update(v.to_le_bytes());
    }
    if let Some(t) = data.tasks() {
        h.update(b"tasks");
        for &x in t {
            h.update((x as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// SHA-256 of a list of matrices, for banks without raw features.
pub fn fingerprint_matrices<'a>(mats: impl IntoIterator<Item = &'a DMatrix<f64>>) -> String {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One row per outer iteration: objective, weight change, inner iterations, weights.
pub fn write_fit_trace<W: Write>(writer: W, trace: &FitTrace) -> Result<()> {
    let m = trace.records.first().map_or(0, |r| r.weights.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["iteration".to_string(), "objective".into(), "max_weight_change".into(), "inner_iterations".into()];
    header.extend((1..=m).map(|k| format!("d_{k}")));
    w.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![r.iteration.to_string(), r.objective.to_string(), r.max_weight_change.to_string(), r.inner_iterations.to_string()];
        row.extend(r.weights.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per MacKay iteration: negative log marginal likelihood and weights.
pub fn write_bayes_trace<W: Write>(writer: W, state: &BayesState) -> Result<()> {
    let m = state.d.len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["iteration".to_string(), "nll".into()];
    header.extend((1..=m).map(|k| format!("d_{k}")));
    w.write_record(&header)?;
    for (i, (nll, d)) in state.nll_trace.iter().zip(&state.weight_trace).enumerate() {
        let mut row = vec![i.to_string(), nll.to_string()];
        row.extend(d.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
