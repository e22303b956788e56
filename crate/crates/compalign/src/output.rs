//! JSON, CSV and PGM writers. Every CSV has a header row and uses `,` and `.`.

use std::fs;
use std::io::Write;
use std::path::Path;

use compalign_core::compression::StepLog;
use compalign_core::losses::LossTerm;
use compalign_core::metrics::MisalignmentReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, csv_string(rows)?).map_err(io_err(path))
}

pub fn parse_csv<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_csv(&text)
}

/// One row of the reference training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy for classification, foreground dice for segmentation.
    pub train_metric: f64,
    pub eval_metric: f64,
}

/// One row per rewind step (or one row for group sparsity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub sparsity: f64,
    pub loss: f64,
    pub ce: Option<f64>,
    pub mse: Option<f64>,
    pub ce_pred: Option<f64>,
    pub kd: Option<f64>,
    pub max_simplex_error: f64,
    pub min_weight: f64,
    pub eval_accuracy: Option<f64>,
    pub cie_count: Option<usize>,
}

impl From<&StepLog> for StepRow {
    fn from(l: &StepLog) -> Self {
        StepRow {
            step: l.step,
            sparsity: l.sparsity,
            loss: l.loss,
            ce: l.terms.get(LossTerm::Ce),
            mse: l.terms.get(LossTerm::Mse),
            ce_pred: l.terms.get(LossTerm::CePred),
            kd: l.terms.get(LossTerm::Kd),
            max_simplex_error: l.max_simplex_error,
            min_weight: l.min_weight,
            eval_accuracy: l.eval_accuracy,
            cie_count: l.cie_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub error_reference: f64,
    pub error_compressed: f64,
    pub accuracy_delta: f64,
}

pub fn class_rows(report: &MisalignmentReport) -> Vec<ClassRow> {
    let f = &report.fairness;
    (0..report.classes)
        .map(|c| ClassRow {
            class: c,
            error_reference: f.error_reference[c],
            error_compressed: f.error_compressed[c],
            accuracy_delta: f.class_accuracy_delta[c],
        })
        .collect()
}

/// `kind` is `cie` or `cie_u`; `index` is an example (or pixel) index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRow {
    pub kind: String,
    pub index: usize,
}

pub fn index_rows(report: &MisalignmentReport) -> Vec<IndexRow> {
    let tag = |kind: &str, v: &[usize]| -> Vec<IndexRow> {
        v.iter().map(|&index| IndexRow { kind: kind.to_string(), index }).collect()
    };
    let mut rows = tag("cie", &report.cie_indices);
    rows.extend(tag("cie_u", &report.cie_u_indices));
    rows
}

/// Writes `report.json`, `per_class.csv` and `cie.csv` into `dir`.
pub fn write_report_bundle(dir: &Path, report: &MisalignmentReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_csv(&dir.join("per_class.csv"), &class_rows(report))?;
    write_csv(&dir.join("cie.csv"), &index_rows(report))
}

/// Plain-text PGM (P2) with values in `[0, 1]` mapped to 0..=255.
pub fn pgm_string(values: &[f64], height: usize, width: usize) -> String {
    assert_eq!(values.len(), height * width, "pgm dimensions");
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(pgm_string(values, height, width).as_bytes()).map_err(io_err(path))
}
