//! Evaluation reports, run records and training logs.

use std::io::Write;
use std::path::Path;

use revisp_core::metrics::EvalReport;
use revisp_core::trainer::StepMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, write_json, Result};

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(path, report)
}

/// One row per unit followed by a `mean` row.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| format_err(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "psnr_db", "ae_deg", "ae_skipped_pixels"])
        .map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.id.clone(),
            r.psnr_db.to_string(),
            r.ae_deg.to_string(),
            r.ae_skipped_pixels.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let a = &report.aggregate;
    let skipped: usize = report.rows.iter().map(|r| r.ae_skipped_pixels).sum();
    w.write_record([
        "mean".to_string(),
        a.psnr_db.to_string(),
        a.ae_deg.to_string(),
        skipped.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(io_err(path))
}

/// Appends one JSON object per step.
pub fn append_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    for m in metrics {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub revisp: String,
    pub checkpoint_schema: u32,
    pub manifest_schema: u32,
    pub sidecar_schema: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            revisp: env!("CARGO_PKG_VERSION").into(),
            checkpoint_schema: crate::checkpoint::CHECKPOINT_SCHEMA,
            manifest_schema: crate::manifest::MANIFEST_SCHEMA,
            sidecar_schema: crate::image_io::SIDECAR_SCHEMA,
        }
    }
}

/// Written next to every command's outputs. Holds no timestamps so reruns
/// produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub versions: Versions,
}

impl RunRecord {
    pub fn new(command: &str, seed: Option<u64>, config_hash: Option<String>) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seed,
            config_hash,
            versions: Versions::default(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
