//! Line-delimited metrics log: one JSON record per training step plus one
//! per epoch.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval::SearchMetrics;
use crate::loss::LossReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub search: Option<SearchMetrics>,
}

/// Collects records in memory and, when given a path, appends them as JSONL.
#[derive(Debug, Default)]
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    pub fn at_path(path: &Path) -> Self {
        MetricsLog { path: Some(path.to_path_buf()), ..MetricsLog::default() }
    }

    pub fn log_step(&mut self, epoch: usize, step: usize, lr: f64, report: LossReport) -> Result<()> {
        let record = StepRecord { kind: "step", epoch, step, lr, report };
        self.append_line(&serde_json::to_string(&record).unwrap())?;
        self.steps.push(record);
        Ok(())
    }

    pub fn log_epoch(&mut self, record: EpochRecord) -> Result<()> {
        let mut line = serde_json::to_value(&record).unwrap();
        line.as_object_mut().unwrap().insert("kind".into(), "epoch".into());
        self.append_line(&serde_json::to_string(&line).unwrap())?;
        self.epochs.push(record);
        Ok(())
    }

    fn append_line(&self, line: &str) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| CoreError::Io { path: path.clone(), source })?;
        writeln!(file, "{line}")
            .map_err(|source| CoreError::Io { path: path.clone(), source })
    }
}
