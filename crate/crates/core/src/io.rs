//! Model persistence (versioned JSON) and CSV input/output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lla::LlaPosterior;
use crate::neuralef::NeuralEfModel;
use crate::nystrom::NystromModel;

pub const FORMAT_VERSION: u64 = 1;

/// Any persistable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum Model {
    Neuralef(NeuralEfModel),
    Nystrom(NystromModel),
    LlaPosterior(LlaPosterior),
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    format_version: u64,
    #[serde(flatten)]
    model: &'a Model,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    #[allow(dead_code)]
    format_version: u64,
    #[serde(flatten)]
    model: Model,
}

#[derive(Deserialize)]
struct Header {
    format_version: Option<u64>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Serializes a model to its JSON document.
pub fn model_to_json(model: &Model) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&EnvelopeOut {
        format_version: FORMAT_VERSION,
        model,
    })
    .map_err(|e| Error::Numeric(format!("cannot serialize model: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_string(path, &model_to_json(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    model_from_json(&text, path)
}

/// Parses a model document; `path` is only used for error context.
pub fn model_from_json(text: &str, path: &Path) -> Result<Model> {
    let header: Header = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    match header.format_version {
        Some(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                column: 1,
                message: "missing format_version".into(),
            })
        }
    }
    let env: EnvelopeIn = serde_json::from_str(text).map_err(|e| parse_err(path, e))?;
    Ok(env.model)
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numeric(format!("cannot serialize {}: {e}", path.display())))?;
    s.push('\n');
    write_string(path, &s)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let (line, message) = match e.position() {
        Some(pos) => (pos.line() as usize, e.to_string()),
        None => (0, e.to_string()),
    };
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column: 0,
        message,
    }
}

/// Matrix as CSV text: one row per line, comma-separated, no header.
pub fn matrix_to_csv(m: &Matrix) -> String {
    table_to_csv(None, m)
}

/// CSV with an optional header row.
pub fn table_to_csv(header: Option<&[&str]>, m: &Matrix) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h).expect("in-memory write");
    }
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v}")))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    write_string(path, &matrix_to_csv(m))
}

pub fn write_table_csv(path: &Path, header: &[&str], m: &Matrix) -> Result<()> {
    write_string(path, &table_to_csv(Some(header), m))
}

/// Reads a header-less numeric CSV into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    column: col + 1,
                    message: format!("`{f}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Reads points from CSV; with `labels_last_column` the final column holds class ids.
pub fn read_dataset_csv(path: &Path, labels_last_column: bool) -> Result<Dataset> {
    let m = read_matrix_csv(path)?;
    if !labels_last_column {
        return Ok(Dataset::new(m));
    }
    if m.cols() < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least one feature column plus labels",
            path.display()
        )));
    }
    let d = m.cols() - 1;
    let feats: Vec<usize> = (0..d).collect();
    let all: Vec<usize> = (0..m.rows()).collect();
    let labels = m
        .column(d)
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::invalid(format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::with_labels(m.select(&all, &feats), labels)
}
