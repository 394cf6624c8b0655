//! Summary tables and plot data from run records.
//!
//! Layout of a report directory:
//!
//! ```text
//! runs/<label>.csv, runs/<label>.json   one record per method
//! runs/labels.txt                       method order, one label per line
//! summary.csv, summary.txt              one row per method
//! plot_accuracy.csv                     batch_index, then one column per method
//! plot_intra.csv, plot_inter.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cafa::tta::{BatchRow, RunRecord};
use cafa::{Error, Result};

/// Lists the labels under `runs/` in the order they were run.
pub const LABELS_FILE: &str = "labels.txt";

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "label",
    "mean_accuracy",
    "final_quarter_accuracy",
    "final_accuracy",
    "initial_mean_intra",
    "final_mean_intra",
    "final_mean_inter",
];

/// One method's headline numbers. "Final" distances are final-quarter means;
/// `final_accuracy` is the last batch alone.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub mean_accuracy: f64,
    pub final_quarter_accuracy: f64,
    pub final_accuracy: f64,
    pub initial_mean_intra: f64,
    pub final_mean_intra: f64,
    pub final_mean_inter: f64,
}

impl SummaryRow {
    pub fn from_record(record: &RunRecord) -> Result<Self> {
        let (first, last) = match (record.rows.first(), record.rows.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::EmptyInput),
        };
        Ok(SummaryRow {
            label: record.label().to_string(),
            mean_accuracy: record.mean_accuracy(),
            final_quarter_accuracy: record.final_quarter_accuracy(),
            final_accuracy: last.accuracy,
            initial_mean_intra: first.mean_intra,
            final_mean_intra: record.final_quarter(|r| r.mean_intra),
            final_mean_inter: record.final_quarter(|r| r.mean_inter),
        })
    }

    fn values(&self) -> [f64; 6] {
        [
            self.mean_accuracy,
            self.final_quarter_accuracy,
            self.final_accuracy,
            self.initial_mean_intra,
            self.final_mean_intra,
            self.final_mean_inter,
        ]
    }
}

pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    records.iter().map(SummaryRow::from_record).collect()
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.label.clone()];
        rec.extend(r.values().iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)
}

/// Aligned plain-text table; accuracies in percent.
pub fn summary_text(rows: &[SummaryRow]) -> String {
    let headers = [
        "method",
        "mean acc %",
        "final-q acc %",
        "last acc %",
        "intra@0",
        "final intra",
        "final inter",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.2}", 100.0 * r.mean_accuracy),
                format!("{:.2}", 100.0 * r.final_quarter_accuracy),
                format!("{:.2}", 100.0 * r.final_accuracy),
                format!("{:.4}", r.initial_mean_intra),
                format!("{:.4}", r.final_mean_intra),
                format!("{:.4}", r.final_mean_inter),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|k| {
            cells
                .iter()
                .map(|c| c[k].len())
                .chain([headers[k].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |fields: &[&str]| {
        for (k, f) in fields.iter().enumerate() {
            if k == 0 {
                let _ = write!(out, "{f:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {f:>w$}", w = widths[k]);
            }
        }
        out.push('\n');
    };
    line(&headers);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&rule.iter().map(String::as_str).collect::<Vec<_>>());
    for c in &cells {
        line(&c.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// `batch_index` followed by `field` of every record; rows past a record's
/// end are left empty.
pub fn plot_csv(records: &[RunRecord], field: impl Fn(&BatchRow) -> f64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["batch_index".to_string()];
    header.extend(records.iter().map(|r| r.label().to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let n = records.iter().map(|r| r.rows.len()).max().unwrap_or(0);
    for i in 0..n {
        let mut rec = vec![i.to_string()];
        rec.extend(
            records
                .iter()
                .map(|r| r.rows.get(i).map(|row| field(row).to_string()).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes the summary and plot files for `records` into `dir`.
pub fn write_summary(dir: &Path, records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = summarize(records)?;
    write(dir.join("summary.csv"), &summary_csv(&rows)?)?;
    write(dir.join("summary.txt"), &summary_text(&rows))?;
    write(dir.join("plot_accuracy.csv"), &plot_csv(records, |r| r.accuracy)?)?;
    write(dir.join("plot_intra.csv"), &plot_csv(records, |r| r.mean_intra)?)?;
    write(dir.join("plot_inter.csv"), &plot_csv(records, |r| r.mean_inter)?)?;
    Ok(rows)
}

/// Writes every record under `dir/runs` plus the summary and plot files.
pub fn write_report(dir: &Path, records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let runs = dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut labels = String::new();
    for r in records {
        r.write_to(&runs, r.label())?;
        labels.push_str(r.label());
        labels.push('\n');
    }
    write(runs.join(LABELS_FILE), &labels)?;
    write_summary(dir, records)
}

/// Loads the records in `runs_dir`, in the order of its label list when
/// present and by file name otherwise. Each record needs its JSON sidecar.
pub fn read_runs(runs_dir: &Path) -> Result<Vec<RunRecord>> {
    let listing = runs_dir.join(LABELS_FILE);
    let paths: Vec<PathBuf> = if listing.is_file() {
        let text = fs::read_to_string(&listing).map_err(|e| Error::io(&listing, e))?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| runs_dir.join(format!("{l}.csv")))
            .collect()
    } else {
        let entries = fs::read_dir(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(runs_dir, e))?.path();
            if path.extension().is_some_and(|x| x == "csv") {
                paths.push(path);
            }
        }
        paths.sort();
        paths
    };
    if paths.is_empty() {
        return Err(Error::ConfigInvalid(format!(
            "no run records in {}",
            runs_dir.display()
        )));
    }
    paths.iter().map(RunRecord::read_from).collect()
}
