//! Run records: everything needed to regenerate one run of the matrix.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use bap_core::alignment::TrainLog;
use bap_core::evaluation::MetricsRow;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::MethodResult;

/// Content hash of the sources this binary was built from.
pub const CODE_HASH: &str = env!("BAP_CODE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<(usize, f64, f64)>,
    pub final_checksum: u64,
    pub early_stopped: bool,
    /// Stable digest of the consumed `(fg, bg, seed)` sequence.
    pub stream_digest: u64,
    pub lr_base: f64,
    pub wall_ms: u128,
}

impl TrainSummary {
    pub fn from_log(log: &TrainLog, lr_base: f64) -> Self {
        let stream_digest = log
            .consumed
            .iter()
            .fold(0u64, |h, &(f, b, s)| bap_core::seed::derive(h, &[f, b, s]));
        TrainSummary {
            epochs: log.epochs.iter().map(|e| (e.epoch, e.loss, e.lr)).collect(),
            final_checksum: log.checksum,
            early_stopped: log.early_stopped,
            stream_digest,
            lr_base,
            wall_ms: log.epochs.iter().map(|e| e.wall_ms).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub row: MetricsRow,
    pub cells: Vec<(usize, usize, usize, usize)>,
    pub bsi_encoder: String,
    pub prototype_ties: usize,
    pub empty_groups: Option<String>,
    pub finetune_trace: Vec<(f64, f64)>,
}

impl ResultRecord {
    pub fn new(r: &MethodResult, run_id: &str, seed: u64) -> Self {
        ResultRecord {
            row: r.row(run_id, seed),
            cells: r.metrics.cells.iter().map(|(&(y, g), &(c, t))| (y, g, c, t)).collect(),
            bsi_encoder: r.bsi_encoder.clone(),
            prototype_ties: r.ties,
            empty_groups: r.metrics.flag(),
            finetune_trace: r.finetune_trace.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub run_index: usize,
    pub seed: u64,
    pub code_hash: String,
    pub config: ExperimentConfig,
    pub train: BTreeMap<String, TrainSummary>,
    pub results: Vec<ResultRecord>,
    /// `(avg, wga)` per epoch while fine-tuning the BAP student on ρ = 1 data.
    pub bap_finetune_trace: Vec<(f64, f64)>,
    pub wall_ms: u128,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
