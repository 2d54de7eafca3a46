use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SweepRow;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "experiment,op,params_json,seed,riemann_estimate,exact_delta_loss,frobenius_error,sparsity,sign_flip_fraction";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn render_report(rows: &[SweepRow], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            // Written by hand so an empty report still has its header.
            w.write_record(CSV_HEADER.split(','))?;
            for row in rows {
                w.write_record([
                    row.experiment.clone(),
                    row.op.clone(),
                    row.params_json.clone(),
                    row.seed.to_string(),
                    row.riemann_estimate.to_string(),
                    row.exact_delta_loss.to_string(),
                    row.frobenius_error.to_string(),
                    row.sparsity.to_string(),
                    row.sign_flip_fraction.to_string(),
                ])?;
            }
            w.into_inner()
                .map_err(|e| Error::InvalidConfig(format!("csv buffer: {e}")))
        }
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(rows)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

pub fn emit_report(rows: &[SweepRow], path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = render_report(rows, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
