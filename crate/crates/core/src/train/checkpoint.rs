//! Versioned checkpoint files: a header line carrying a SHA-256 of the JSON
//! body, then the body itself. Tampered or truncated files refuse to load.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics_log::EpochRecord;
use super::TrainConfig;
use crate::error::{CoreError, Result};
use crate::loss::OimState;
use crate::nn::ParamEntry;

pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_PREFIX: &str = "aerosearch-checkpoint-v1 sha256=";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointBody {
    pub version: u32,
    pub config: TrainConfig,
    /// Epochs already completed.
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer: Vec<ArrayD<f64>>,
    pub oim_student: OimState,
    pub oim_teacher: Option<OimState>,
    /// Raw identity labels backing the OIM class axis.
    pub identity_ids: Vec<i64>,
    pub metrics_history: Vec<EpochRecord>,
}

pub fn save_checkpoint(body: &CheckpointBody, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(body)
        .map_err(|e| CoreError::Checkpoint(format!("serialize: {e}")))?;
    let digest = hex(&Sha256::digest(&json));
    let mut out = Vec::with_capacity(json.len() + 80);
    out.extend_from_slice(HEADER_PREFIX.as_bytes());
    out.extend_from_slice(digest.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&json);
    fs::write(path, out).map_err(|source| CoreError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBody> {
    let data =
        fs::read(path).map_err(|source| CoreError::Io { path: path.to_path_buf(), source })?;
    let newline = data.iter().position(|&b| b == b'\n').ok_or_else(|| {
        CoreError::Checkpoint(format!("{}: missing header line", path.display()))
    })?;
    let header = std::str::from_utf8(&data[..newline])
        .map_err(|_| CoreError::Checkpoint(format!("{}: invalid header", path.display())))?;
    let stored = header.strip_prefix(HEADER_PREFIX).ok_or_else(|| {
        CoreError::Checkpoint(format!("{}: not a checkpoint file", path.display()))
    })?;
    let body_bytes = &data[newline + 1..];
    let digest = hex(&Sha256::digest(body_bytes));
    if digest != stored {
        return Err(CoreError::Checkpoint(format!(
            "{}: integrity check failed (sha256 {digest} != header {stored}); refusing to resume",
            path.display()
        )));
    }
    let body: CheckpointBody = serde_json::from_slice(body_bytes)
        .map_err(|e| CoreError::Checkpoint(format!("{}: parse: {e}", path.display())))?;
    if body.version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            body.version
        )));
    }
    Ok(body)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
