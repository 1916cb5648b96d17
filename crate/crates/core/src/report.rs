//! Plot-ready CSV and JSON reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ErrorReport;

/// Named per-epoch accuracy series sharing an epoch axis starting at 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Curves {
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Curves {
    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.series.push(Series {
            name: name.to_string(),
            values,
        });
    }

    pub fn epochs(&self) -> usize {
        self.series.iter().map(|s| s.values.len()).max().unwrap_or(0)
    }

    /// `epoch,<series...>`; shorter series leave trailing cells empty.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut header = String::from("epoch");
        for s in &self.series {
            header.push(',');
            header.push_str(&s.name);
        }
        writeln!(out, "{header}")?;
        for e in 0..self.epochs() {
            let mut line = e.to_string();
            for s in &self.series {
                line.push(',');
                if let Some(v) = s.values.get(e) {
                    line.push_str(&v.to_string());
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(input);
        let names: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut curves = Curves {
            series: names
                .iter()
                .map(|n| Series {
                    name: n.clone(),
                    values: Vec::new(),
                })
                .collect(),
        };
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (col, cell) in rec.iter().skip(1).enumerate() {
                if cell.is_empty() {
                    continue;
                }
                let v = cell.parse().map_err(|_| Error::Parse {
                    source_name: "curves".into(),
                    location: format!("row {}, column {}", row + 2, col + 2),
                    message: format!("not a number: {cell:?}"),
                })?;
                curves.series[col].values.push(v);
            }
        }
        Ok(curves)
    }
}

/// One row of the method comparison, in the `Ref / Err. / Err. drop` layout:
/// the drop is reference error minus final error (positive is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub method: String,
    pub ref_error_pct: f64,
    pub quantized_error_pct: f64,
    pub error_pct: f64,
    pub error_drop_pct: f64,
    pub mean_weight_mse: f64,
    pub compression_ratio: f64,
}

pub const COMPARISON_HEADER: &str =
    "model,method,ref_error_pct,quantized_error_pct,error_pct,error_drop_pct,mean_weight_mse,compression_ratio";

pub fn write_comparison_csv(rows: &[ComparisonRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{COMPARISON_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.model,
            r.method,
            r.ref_error_pct,
            r.quantized_error_pct,
            r.error_pct,
            r.error_drop_pct,
            r.mean_weight_mse,
            r.compression_ratio
        )?;
    }
    Ok(())
}

/// Everything the comparison stage produces, as stored in `comparison.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ComparisonRow>,
    pub curves: Curves,
    pub reports: Vec<ErrorReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportStatus {
    Complete,
    /// Files were written but some input was empty.
    Warning(String),
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_with(path, |w| w.write_all(text.as_bytes()))
}

pub const CURVES_FILE: &str = "curves.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const ERRORS_CSV: &str = "errors.csv";

/// Writes the accuracy curves, the comparison table (CSV and JSON) and the
/// per-layer error CSV into `dir`.
pub fn emit_report(report: &ComparisonReport, dir: &Path) -> Result<ReportStatus> {
    write_with(&dir.join(CURVES_FILE), |w| report.curves.write_csv(w))?;
    write_with(&dir.join(COMPARISON_CSV), |w| write_comparison_csv(&report.rows, w))?;
    write_json(&dir.join(COMPARISON_JSON), report)?;
    write_with(&dir.join(ERRORS_CSV), |w| ErrorReport::write_csv(&report.reports, w))?;
    if report.curves.epochs() == 0 {
        return Ok(ReportStatus::Warning("training curves are empty".into()));
    }
    if report.rows.is_empty() {
        return Ok(ReportStatus::Warning("comparison table is empty".into()));
    }
    Ok(ReportStatus::Complete)
}
