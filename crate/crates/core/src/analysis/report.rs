use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ablation::{AblationResult, AblationRow};
use super::activations::ActivationReport;
use crate::error::{Error, Result};

/// Comma-separated rows with a header, or a JSON document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Rows,
    Structured,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rows" | "csv" => Ok(ReportFormat::Rows),
            "structured" | "json" => Ok(ReportFormat::Structured),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format `{other}` (expected rows or structured)"
            ))),
        }
    }
}

pub const ABLATION_HEADER: [&str; 4] = ["variant", "params", "top1_mean", "top1_std"];
pub const ACTIVATION_HEADER: [&str; 5] = [
    "level",
    "connection",
    "src",
    "mean_abs",
    "ratio_to_residual",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            what: path.display().to_string(),
            detail: format!("{other:?}"),
        },
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes to JSON");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes one row per variant with fields `(variant, params, top1_mean,
/// top1_std)`. Floats are written in their shortest round-trip form.
pub fn emit_report(result: &AblationResult, path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Structured => write_json(result, path),
        ReportFormat::Rows => write_rows(
            path,
            &ABLATION_HEADER,
            result.rows.iter().map(|r| {
                vec![
                    r.variant.clone(),
                    r.params.to_string(),
                    r.top1_mean.to_string(),
                    r.top1_std.to_string(),
                ]
            }),
        ),
    }
}

/// Reads a file written by [`emit_report`].
pub fn parse_report(path: &Path, format: ReportFormat) -> Result<AblationResult> {
    let parse_err = |detail: String| Error::Parse {
        what: path.display().to_string(),
        detail,
    };
    match format {
        ReportFormat::Structured => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
        ReportFormat::Rows => {
            let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
            let header = r.headers().map_err(|e| csv_err(path, e))?;
            if header.iter().ne(ABLATION_HEADER) {
                return Err(parse_err(format!("unexpected header {header:?}")));
            }
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| csv_err(path, e))?;
                let num = |i: usize| -> Result<f64> {
                    rec[i]
                        .parse()
                        .map_err(|e| parse_err(format!("{}: {e}", ABLATION_HEADER[i])))
                };
                rows.push(AblationRow {
                    variant: rec[0].to_string(),
                    params: rec[1]
                        .parse()
                        .map_err(|e| parse_err(format!("params: {e}")))?,
                    top1_mean: num(2)?,
                    top1_std: num(3)?,
                });
            }
            Ok(AblationResult { rows })
        }
    }
}

/// One row per residual and per projection, projections carrying their
/// ratio to the residual of the same level.
pub fn emit_activation_report(
    report: &ActivationReport,
    path: &Path,
    format: ReportFormat,
) -> Result<()> {
    match format {
        ReportFormat::Structured => write_json(report, path),
        ReportFormat::Rows => {
            let mut rows = Vec::new();
            for level in &report.levels {
                rows.push(vec![
                    level.level.to_string(),
                    "residual".into(),
                    String::new(),
                    level.mean_abs_residual.to_string(),
                    String::new(),
                ]);
                for (p, (_, ratio)) in level.projections.iter().zip(level.ratios()) {
                    rows.push(vec![
                        level.level.to_string(),
                        "projection".into(),
                        p.src.to_string(),
                        p.mean_abs.to_string(),
                        ratio.to_string(),
                    ]);
                }
            }
            write_rows(path, &ACTIVATION_HEADER, rows)
        }
    }
}
