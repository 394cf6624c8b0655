//! Per-batch metrics of one adaptation run and their on-disk form.
//!
//! CSV columns: `batch_index,accuracy,loss,mean_intra,mean_inter`. Numbers
//! are written with shortest round-trip formatting. The run header (config,
//! method label, timing) goes to a JSON sidecar next to the CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TtaConfig;
use crate::error::{Error, Result};

pub const RECORD_COLUMNS: [&str; 5] = ["batch_index", "accuracy", "loss", "mean_intra", "mean_inter"];

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub batch_index: usize,
    /// Accuracy of the pre-update predictions against ground truth.
    pub accuracy: f64,
    /// Loss at the first optimization step (pre-update); 0 for methods
    /// without a loss.
    pub loss: f64,
    pub mean_intra: f64,
    pub mean_inter: f64,
    pub wall_time_s: f64,
    pub predictions: Vec<usize>,
    pub steps_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub label: String,
    pub config: TtaConfig,
    #[serde(default)]
    pub n_batches: usize,
    #[serde(default)]
    pub total_wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub rows: Vec<BatchRow>,
}

impl RunRecord {
    pub fn new(label: impl Into<String>, config: TtaConfig) -> Self {
        RunRecord {
            header: RunHeader {
                label: label.into(),
                config,
                n_batches: 0,
                total_wall_time_s: 0.0,
            },
            rows: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, row: BatchRow) {
        self.header.n_batches += 1;
        self.header.total_wall_time_s += row.wall_time_s;
        self.rows.push(row);
    }

    pub fn label(&self) -> &str {
        &self.header.label
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.accuracy))
    }

    /// Mean of `field` over the last `⌈n/4⌉` rows.
    pub fn final_quarter<F: Fn(&BatchRow) -> f64>(&self, field: F) -> f64 {
        let n = self.rows.len();
        let k = n.div_ceil(4);
        mean(self.rows[n - k..].iter().map(field))
    }

    pub fn final_quarter_accuracy(&self) -> f64 {
        self.final_quarter(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RECORD_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.batch_index.to_string(),
                r.accuracy.to_string(),
                r.loss.to_string(),
                r.mean_intra.to_string(),
                r.mean_inter.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn header_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.header).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, self.header_json()? + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }

    /// Reads a record written by [`RunRecord::write_to`]. Predictions, step
    /// counts and per-batch wall times are not persisted and come back empty.
    pub fn read_from(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let json_path = csv_path.with_extension("json");
        let header_text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: RunHeader =
            serde_json::from_str(&header_text).map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let rows = parse_rows(&text)?;
        Ok(RunRecord { header, rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn parse_rows(text: &str) -> Result<Vec<BatchRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(RECORD_COLUMNS.iter().copied()) {
        return Err(Error::Format(format!("unexpected run record columns {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::Format(format!("bad {} value `{}`", RECORD_COLUMNS[k], &rec[k])))
        };
        rows.push(BatchRow {
            batch_index: rec[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad batch index `{}`", &rec[0])))?,
            accuracy: num(1)?,
            loss: num(2)?,
            mean_intra: num(3)?,
            mean_inter: num(4)?,
            wall_time_s: 0.0,
            predictions: Vec::new(),
            steps_run: 0,
        });
    }
    Ok(rows)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
