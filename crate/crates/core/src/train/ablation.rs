//! Ablation driver: trains one model per grid cell under a shared seed and
//! tabulates mAP/top-1 (plus detection Recall/AP for the detach study).

use serde::{Deserialize, Serialize};

use super::runner::run_training;
use super::TrainConfig;
use crate::error::Result;

/// One training variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    /// Build the teacher branch at all.
    pub teacher: bool,
    pub prob_kd: bool,
    pub rela_kd: bool,
    pub detach: bool,
}

impl AblationCell {
    /// The 2x2 distillation-loss grid (teacher always attached).
    pub fn hkd_grid() -> Vec<AblationCell> {
        let mut cells = Vec::new();
        for &prob in &[false, true] {
            for &rela in &[false, true] {
                cells.push(AblationCell {
                    label: format!(
                        "hkd prob={} rela={}",
                        if prob { "on" } else { "off" },
                        if rela { "on" } else { "off" }
                    ),
                    teacher: true,
                    prob_kd: prob,
                    rela_kd: rela,
                    detach: true,
                });
            }
        }
        cells
    }

    /// Detach on/off under probability distillation only.
    pub fn detach_grid() -> Vec<AblationCell> {
        [true, false]
            .into_iter()
            .map(|detach| AblationCell {
                label: format!("detach={}", if detach { "on" } else { "off" }),
                teacher: true,
                prob_kd: true,
                rela_kd: false,
                detach,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub prob_kd: bool,
    pub rela_kd: bool,
    pub detach: bool,
    pub map: f64,
    pub top1: f64,
    pub recall: Option<f64>,
    pub ap: Option<f64>,
}

/// Train every cell with the shared base config and seed; one row per cell.
pub fn ablation_suite(base: &TrainConfig, grid: &[AblationCell]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cell in grid {
        let mut config = base.clone();
        config.model.with_teacher = cell.teacher;
        config.enable_prob_kd = cell.prob_kd;
        config.enable_rela_kd = cell.rela_kd;
        config.detach_teacher = cell.detach;
        let outcome = run_training(config, None, None)?;
        let det = outcome.final_metrics.detection;
        rows.push(AblationRow {
            label: cell.label.clone(),
            prob_kd: cell.prob_kd,
            rela_kd: cell.rela_kd,
            detach: cell.detach,
            map: outcome.final_metrics.search.map,
            top1: outcome.final_metrics.search.top1,
            recall: det.map(|d| d.recall),
            ap: det.map(|d| d.ap),
        });
    }
    Ok(rows)
}

/// Plain-text comparison table.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>6} {:>6} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "L_prob", "L_rela", "detach", "mAP", "top-1", "Recall", "AP"
    ));
    for r in rows {
        let onoff = |b: bool| if b { "x" } else { "-" };
        out.push_str(&format!(
            "{:<24} {:>6} {:>6} {:>7} {:>8.4} {:>8.4} {:>8} {:>8}\n",
            r.label,
            onoff(r.prob_kd),
            onoff(r.rela_kd),
            onoff(r.detach),
            r.map,
            r.top1,
            r.recall.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            r.ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        ));
    }
    out
}
