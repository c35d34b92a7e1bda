//! Training objectives: OIM with lookup table and circular queue,
//! probability and relation distillation between the two ReID heads, and
//! loss composition with reporting.

mod distill;
mod oim;

pub use distill::{
    kl_divergence, prob_distill_loss, prob_distill_loss_node, relation_distill_loss,
    relation_distill_loss_node, relation_from_similarity, similarity_matrix, RelationDistance,
    LOG_EPS,
};
pub use oim::{OimOutcome, OimState};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which ReID head produced a batch of embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Student,
    Teacher,
}

/// Unit-norm person embeddings with identity labels: the currency of all
/// ReID losses. Labels are either `-1` (unlabeled person) or a class index
/// in `[0, C)` after identity mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Array2<f64>,
    identities: Vec<i64>,
    pub branch: Branch,
}

pub const UNIT_NORM_TOL: f64 = 1e-5;

impl EmbeddingBatch {
    pub fn new(embeddings: Array2<f64>, identities: Vec<i64>, branch: Branch) -> Result<Self> {
        if embeddings.nrows() != identities.len() {
            return Err(CoreError::InvalidArgument(format!(
                "{} embeddings but {} identities",
                embeddings.nrows(),
                identities.len()
            )));
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(CoreError::InvalidArgument(format!(
                    "embedding {i} has norm {norm}, expected 1 within {UNIT_NORM_TOL}"
                )));
            }
        }
        Ok(EmbeddingBatch { embeddings, identities, branch })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn identities(&self) -> &[i64] {
        &self.identities
    }

    /// Row indices carrying a labeled identity (>= 0).
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.identities
            .iter()
            .enumerate()
            .filter(|(_, &id)| id >= 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Row-stochastic class probabilities over the C training identities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityBatch {
    probs: Array2<f64>,
}

impl ProbabilityBatch {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if v < 0.0 {
                    return Err(CoreError::InvalidArgument(format!(
                        "row {i} has negative probability {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CoreError::InvalidArgument(format!(
                    "row {i} sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        Ok(ProbabilityBatch { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }
}

/// Scalar loss plus a flag for degenerate (empty) batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutcome {
    pub value: f64,
    pub empty_batch: bool,
}

/// Weights entering the composed objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_prob: f64,
    pub lambda_rela: f64,
    pub k_reg1: f64,
    pub k_cls1: f64,
    pub k_reg2: f64,
    pub k_cls2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // detection-head weights match the declared detector base; the
        // distillation weights are the published defaults
        LossWeights {
            lambda_prob: 1.0,
            lambda_rela: 300.0,
            k_reg1: 1.0,
            k_cls1: 1.0,
            k_reg2: 1.0,
            k_cls2: 1.0,
        }
    }
}

/// Weighted detection loss over the four head terms.
pub fn detection_loss(
    l_reg1: f64,
    l_cls1: f64,
    l_reg2: f64,
    l_cls2: f64,
    weights: &LossWeights,
) -> f64 {
    weights.k_reg1 * l_reg1
        + weights.k_cls1 * l_cls1
        + weights.k_reg2 * l_reg2
        + weights.k_cls2 * l_cls2
}

/// The total objective: lambda1*L_prob + lambda2*L_rela + L_det + L_oim^s +
/// L_oim^t. Non-finite components are rejected by name.
pub fn total_loss(
    l_prob: f64,
    l_rela: f64,
    l_det: f64,
    l_oim_s: f64,
    l_oim_t: f64,
    lambda_prob: f64,
    lambda_rela: f64,
) -> Result<f64> {
    for (name, v) in [
        ("l_prob", l_prob),
        ("l_rela", l_rela),
        ("l_det", l_det),
        ("l_oim_s", l_oim_s),
        ("l_oim_t", l_oim_t),
    ] {
        if !v.is_finite() {
            return Err(CoreError::Numeric(format!("component {name} is {v}")));
        }
    }
    Ok(lambda_prob * l_prob + lambda_rela * l_rela + l_det + l_oim_s + l_oim_t)
}

/// Named scalar components of one optimization step, for logging and
/// ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_prob: f64,
    pub l_rela: f64,
    pub l_rpn_obj: f64,
    pub l_rpn_reg: f64,
    pub l_reg1: f64,
    pub l_cls1: f64,
    pub l_reg2: f64,
    pub l_cls2: f64,
    pub l_oim_s: f64,
    pub l_oim_t: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    /// Compose a report from raw components; `total` is derived and the RPN
    /// terms enter it with unit weight.
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        l_prob: f64,
        l_rela: f64,
        l_rpn_obj: f64,
        l_rpn_reg: f64,
        l_reg1: f64,
        l_cls1: f64,
        l_reg2: f64,
        l_cls2: f64,
        l_oim_s: f64,
        l_oim_t: f64,
        weights: LossWeights,
    ) -> Result<Self> {
        for (name, v) in [("l_rpn_obj", l_rpn_obj), ("l_rpn_reg", l_rpn_reg)] {
            if !v.is_finite() {
                return Err(CoreError::Numeric(format!("component {name} is {v}")));
            }
        }
        let l_det = detection_loss(l_reg1, l_cls1, l_reg2, l_cls2, &weights)
            + l_rpn_obj
            + l_rpn_reg;
        let total = total_loss(
            l_prob,
            l_rela,
            l_det,
            l_oim_s,
            l_oim_t,
            weights.lambda_prob,
            weights.lambda_rela,
        )?;
        Ok(LossReport {
            l_prob,
            l_rela,
            l_rpn_obj,
            l_rpn_reg,
            l_reg1,
            l_cls1,
            l_reg2,
            l_cls2,
            l_oim_s,
            l_oim_t,
            total,
            weights,
        })
    }

    /// Recompute `total` from the stored components; reports must satisfy
    /// `|total - recomputed| < 1e-6`.
    pub fn recomputed_total(&self) -> f64 {
        self.weights.lambda_prob * self.l_prob
            + self.weights.lambda_rela * self.l_rela
            + detection_loss(self.l_reg1, self.l_cls1, self.l_reg2, self.l_cls2, &self.weights)
            + self.l_rpn_obj
            + self.l_rpn_reg
            + self.l_oim_s
            + self.l_oim_t
    }
}

#[cfg(test)]
mod tests;
