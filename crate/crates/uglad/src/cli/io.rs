//! File formats: sample CSV (header of feature names, one row per sample,
//! empty cells or "NaN" for missing values), precision/truth/metrics JSON.

use super::CliError;
use crate::data::Dataset;
use crate::fit::{FitMode, FitResult};
use crate::linalg::Matrix;
use crate::metrics::MetricReport;
use crate::synth::{GroundTruth, GroundTruthDoc};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const PRECISION_FORMAT_VERSION: &str = "1";

/// Serialized fit output. Single-estimate modes fill `precision`; the
/// multitask mode fills `precisions`, one block per task.
#[derive(Debug, Serialize, Deserialize)]
pub struct PrecisionDoc {
    pub format_version: String,
    pub features: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precisions: Option<Vec<Vec<Vec<f64>>>>,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus: Option<bool>,
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Matrix, CliError> {
    let r = rows.len();
    if r == 0 {
        return Err(CliError::Data("empty matrix payload".into()));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Data("ragged matrix payload".into()));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl PrecisionDoc {
    pub fn from_result(result: &FitResult, features: &[String]) -> Self {
        let multitask = result.mode == FitMode::Multitask;
        PrecisionDoc {
            format_version: PRECISION_FORMAT_VERSION.to_string(),
            features: features.to_vec(),
            precision: (!multitask).then(|| matrix_to_rows(&result.precision)),
            precisions: result
                .precisions
                .as_ref()
                .filter(|_| multitask)
                .map(|ps| ps.iter().map(matrix_to_rows).collect()),
            mode: result.mode.to_string(),
            best_epoch: result.best_epoch,
            loss_history: result.loss_history.clone(),
            seed: result.seed,
            config: serde_json::to_value(&result.config).expect("config serializes"),
            consensus: result.consensus.then_some(true),
        }
    }

    /// The single precision matrix; errors when the document holds a
    /// multitask list instead.
    pub fn single_precision(&self) -> Result<Matrix, CliError> {
        match &self.precision {
            Some(rows) => rows_to_matrix(rows),
            None => Err(CliError::Data(
                "document holds multitask precisions; expected a single matrix".into(),
            )),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(CliError::io(path.display().to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_truth(path: &Path) -> Result<GroundTruth, CliError> {
    let doc: GroundTruthDoc = read_json(path)?;
    GroundTruth::from_doc(&doc).map_err(|e| CliError::Data(format!("ground truth: {e}")))
}

pub fn write_metrics(path: &Path, report: &MetricReport) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct MetricsDoc<'a> {
        format_version: &'a str,
        #[serde(flatten)]
        report: &'a MetricReport,
    }
    write_json(
        path,
        &MetricsDoc {
            format_version: "1",
            report,
        },
    )
}

/// Writes the sample matrix as CSV: header of feature names, one sample per
/// row, missing entries as empty cells.
pub fn write_csv(path: &Path, x: &Dataset) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Data(format!("open {}: {e}", path.display())))?;
    w.write_record(x.feature_names())
        .map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))?;
    let mut record: Vec<String> = Vec::with_capacity(x.n_features());
    for i in 0..x.n_samples() {
        record.clear();
        for j in 0..x.n_features() {
            if x.is_missing(i, j) {
                record.push(String::new());
            } else {
                record.push(format!("{}", x.data().at(i, j)));
            }
        }
        w.write_record(&record)
            .map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))?;
    }
    w.flush().map_err(CliError::io(path.display().to_string()))
}

/// Parses a sample CSV. Empty cells and any casing of "NaN" mark missing
/// values; parse failures report the 1-based line and column.
pub fn read_csv(path: &Path) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("open {}: {e}", path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let d = names.len();
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        })?;
        if record.len() != d {
            return Err(CliError::Parse {
                path: path.display().to_string(),
                line,
                message: format!("expected {d} fields, found {}", record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                values.push(f64::NAN);
            } else {
                let v: f64 = field.parse().map_err(|_| CliError::Parse {
                    path: path.display().to_string(),
                    line,
                    message: format!("column {} ('{}'): not a number: '{field}'", col + 1, names[col]),
                })?;
                values.push(v);
            }
        }
        rows += 1;
    }
    let matrix = Matrix::from_vec(rows, d, values);
    Dataset::with_missing(matrix, names).map_err(|e| CliError::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::inject_dropout;
    use crate::synth::{generate_precision, sample_mvn};

    #[test]
    fn csv_round_trip_preserves_matrix_and_mask() {
        let truth = generate_precision(6, 0.3, 3).unwrap();
        let x = sample_mvn(&truth, 25, 4);
        let masked = inject_dropout(&x, 0.2, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        write_csv(&path, &masked).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.feature_names(), masked.feature_names());
        assert_eq!(back.missing_total(), masked.missing_total());
        for i in 0..masked.n_samples() {
            for j in 0..masked.n_features() {
                assert_eq!(back.is_missing(i, j), masked.is_missing(i, j));
                if !masked.is_missing(i, j) {
                    // Display round-trips f64 exactly.
                    assert_eq!(back.data().at(i, j), masked.data().at(i, j));
                }
            }
        }
    }

    #[test]
    fn csv_accepts_nan_literals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "a,b\n1.0,NaN\nnan,2.0\n,3.5\n").unwrap();
        let x = read_csv(&path).unwrap();
        assert_eq!(x.missing_total(), 3);
        assert_eq!(x.data().at(2, 1), 3.5);
    }

    #[test]
    fn csv_parse_error_carries_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "a,b\n1.0,2.0\n1.0,oops\n").unwrap();
        match read_csv(&path) {
            Err(CliError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("column 2"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
