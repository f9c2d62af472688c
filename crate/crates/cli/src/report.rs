//! Machine-readable run reports.
//!
//! JSON carries the full report; CSV carries one row per [`Cell`] with the
//! same numeric fields, so either can feed external plotting.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Resolved pipeline settings echoed into every report.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub block_size: usize,
    pub alpha: f32,
    pub sink_tokens: usize,
    pub window_tokens: usize,
    /// `null` when τ defaults to `1/sqrt(head_dim)`.
    pub scale: Option<f32>,
    pub epsilon: f32,
    pub seed: u64,
    /// Subcommand-specific parameters.
    pub params: serde_json::Value,
}

/// One measured configuration. Absent metrics serialize as `null` in JSON
/// and as empty fields in CSV.
#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct Cell {
    pub seq_len: Option<usize>,
    pub num_blocks: usize,
    pub workload: Option<String>,
    pub discovery: Option<String>,
    pub method: Option<String>,
    pub parameter: Option<f64>,
    pub density: Option<f64>,
    pub visits: Option<u64>,
    pub full_visits: Option<u64>,
    pub recall: Option<f64>,
    pub head_retained: Option<f64>,
    pub max_abs_err: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub lse_max_abs_err: Option<f64>,
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: ConfigEcho,
    /// SHA-256 of the command name and canonical config JSON.
    pub config_hash: String,
    pub seed: u64,
    pub timings_ms: BTreeMap<String, f64>,
    pub cells: Vec<Cell>,
}

impl RunReport {
    pub fn new(command: &str, config: ConfigEcho) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update(serde_json::to_vec(&config).expect("config serializes"));
        RunReport {
            command: command.to_string(),
            seed: config.seed,
            config_hash: hex::encode(hasher.finalize()),
            config,
            timings_ms: BTreeMap::new(),
            cells: Vec::new(),
        }
    }

    pub fn time(&mut self, stage: &str, elapsed: std::time::Duration) {
        *self.timings_ms.entry(stage.to_string()).or_default() += elapsed.as_secs_f64() * 1e3;
    }

    pub fn render(&self, format: Format) -> Result<Vec<u8>, CliError> {
        match format {
            Format::Json => {
                let mut out = serde_json::to_vec_pretty(self).map_err(|e| CliError::Report(e.to_string()))?;
                out.push(b'\n');
                Ok(out)
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                if self.cells.is_empty() {
                    w.serialize(Cell::default()).map_err(|e| CliError::Report(e.to_string()))?;
                    let bytes = w.into_inner().map_err(|e| CliError::Report(e.to_string()))?;
                    // Header only.
                    let header_end = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| p + 1);
                    return Ok(bytes[..header_end].to_vec());
                }
                for cell in &self.cells {
                    w.serialize(cell).map_err(|e| CliError::Report(e.to_string()))?;
                }
                w.into_inner().map_err(|e| CliError::Report(e.to_string()))
            }
        }
    }
}
