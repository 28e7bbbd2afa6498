use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One epoch of training. `wall_time` is seconds since the run started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Columns of the metrics file. Wall time is omitted so that files from
/// identical runs are byte-identical.
pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "train_loss",
    "val_loss",
    "val_top1",
    "val_top5",
    "lr",
];

impl MetricsRecord {
    /// One-line summary for progress output.
    pub fn summary(&self) -> String {
        format!(
            "epoch {:>3}  lr {:.5}  train_loss {:.4}  val_loss {:.4}  top1 {:.4}  top5 {:.4}  {:.1}s",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.val_top1, self.val_top5, self.wall_time
        )
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            what: path.display().to_string(),
            detail: format!("{other:?}"),
        },
    }
}

/// Writes a header row and one row per record. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRICS_HEADER)
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_top1.to_string(),
            r.val_top5.to_string(),
            r.lr.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records from a metrics file, with `wall_time` set to zero.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse {
            what: path.display().to_string(),
            detail: format!("unexpected header {header:?}"),
        });
    }
    let parse = |row: &csv::StringRecord, i: usize| -> Result<f64> {
        row[i].parse().map_err(|e| Error::Parse {
            what: path.display().to_string(),
            detail: format!("column {}: {e}", METRICS_HEADER[i]),
        })
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(MetricsRecord {
            epoch: row[0].parse().map_err(|e| Error::Parse {
                what: path.display().to_string(),
                detail: format!("column epoch: {e}"),
            })?,
            train_loss: parse(&row, 1)?,
            val_loss: parse(&row, 2)?,
            val_top1: parse(&row, 3)?,
            val_top5: parse(&row, 4)?,
            lr: parse(&row, 5)?,
            wall_time: 0.0,
        });
    }
    Ok(out)
}
