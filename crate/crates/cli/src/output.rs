//! File schemas written by the commands.

use std::path::{Path, PathBuf};

use crl::eval::{Aggregate, MetricsReport, TTestResult};
use crl::optim::EpochLog;
use crl::LossSpec;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{io_err, CliError, Result};

pub const TOOL_VERSION: &str = concat!("crl ", env!("CARGO_PKG_VERSION"));

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub loss: String,
    pub alpha: f64,
    pub beta: f64,
    pub top1_error_pct: f64,
    pub macro_f1_pct: f64,
    pub one_off_acc_pct: Option<f64>,
}

impl MetricsRow {
    pub fn new(seed: u64, loss: &LossSpec, m: &MetricsReport) -> Self {
        MetricsRow {
            seed,
            loss: loss.kind.name().to_string(),
            alpha: loss.alpha,
            beta: loss.beta,
            top1_error_pct: m.top1_error_pct,
            macro_f1_pct: m.macro_f1_pct,
            one_off_acc_pct: m.one_off_acc_pct,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub metrics: MetricsReport,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub top1_error_pct: Aggregate,
    pub macro_f1_pct: Aggregate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub config: RunConfig,
    pub runs: Vec<SeedReport>,
    pub summary: Summary,
    pub ttest: Option<TTestResult>,
    pub wall_time_s: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

/// Writes a header and records with free-form columns.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}
