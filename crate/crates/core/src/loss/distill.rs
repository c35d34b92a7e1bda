//! Probability-based and relation-based distillation between the teacher and
//! student ReID heads.
//!
//! The probability loss is the symmetric KL divergence between the per-sample
//! class distributions of the two heads, averaged over the labeled persons in
//! the batch. The relation loss compares the row distributions derived from
//! the two batch similarity matrices M = F F^T; three distances are
//! supported: KL on row-softmaxed similarities (default), MSE on the same
//! rows, and KL on (cos+1)/2 kernel rows normalized to sum 1
//! (probability-transfer style mutual-information surrogate).

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{EmbeddingBatch, LossOutcome, ProbabilityBatch};
use crate::autograd::{softmax2, NodeId, Tape};
use crate::error::{CoreError, Result};

/// Floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Distance between sample-relationship rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationDistance {
    #[serde(rename = "kl")]
    Kl,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "mutual_info")]
    MutualInfo,
}

impl RelationDistance {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(RelationDistance::Kl),
            "mse" => Ok(RelationDistance::Mse),
            "mi" | "mutual_info" => Ok(RelationDistance::MutualInfo),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown relation distance '{other}' (expected kl|mse|mi)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RelationDistance::Kl => "kl",
            RelationDistance::Mse => "mse",
            RelationDistance::MutualInfo => "mutual_info",
        }
    }
}

impl std::fmt::Display for RelationDistance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// `KL(p||q) = sum_j p_j ln(p_j/q_j)` with the `0 ln 0 = 0` convention and
/// `q` floored at [`LOG_EPS`].
pub fn kl_divergence(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CoreError::InvalidArgument(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut sum = 0.0;
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        if pv < 0.0 || qv < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "negative probability entry ({pv} / {qv})"
            )));
        }
        if pv > 0.0 {
            sum += pv * (pv.ln() - qv.max(LOG_EPS).ln());
        }
    }
    Ok(sum)
}

/// Probability distillation: mean over samples of the symmetric KL between
/// teacher and student class distributions. Empty batches yield 0, flagged.
pub fn prob_distill_loss(
    p_s: &ProbabilityBatch,
    p_t: &ProbabilityBatch,
) -> Result<LossOutcome> {
    if p_s.len() != p_t.len() || p_s.num_classes() != p_t.num_classes() {
        return Err(CoreError::InvalidArgument(format!(
            "probability shapes differ: {}x{} vs {}x{}",
            p_s.len(),
            p_s.num_classes(),
            p_t.len(),
            p_t.num_classes()
        )));
    }
    if p_s.is_empty() {
        return Ok(LossOutcome { value: 0.0, empty_batch: true });
    }
    let mut total = 0.0;
    for (s, t) in p_s.probs().rows().into_iter().zip(p_t.probs().rows()) {
        total += kl_divergence(t, s)? + kl_divergence(s, t)?;
    }
    Ok(LossOutcome { value: total / p_s.len() as f64, empty_batch: false })
}

/// Batch similarity matrix `M = F F^T` (symmetric, unit diagonal for
/// unit-norm rows).
pub fn similarity_matrix(batch: &EmbeddingBatch) -> Array2<f64> {
    let f = batch.embeddings();
    f.dot(&f.t())
}

/// Relation distillation between matching-order student and teacher batches.
pub fn relation_distill_loss(
    f_s: &EmbeddingBatch,
    f_t: &EmbeddingBatch,
    distance: RelationDistance,
) -> Result<LossOutcome> {
    if f_s.len() != f_t.len() {
        return Err(CoreError::InvalidArgument(format!(
            "batch sizes differ: {} vs {}",
            f_s.len(),
            f_t.len()
        )));
    }
    if f_s.is_empty() {
        return Ok(LossOutcome { value: 0.0, empty_batch: true });
    }
    let m_s = similarity_matrix(f_s);
    let m_t = similarity_matrix(f_t);
    let value = relation_from_similarity(&m_s, &m_t, distance)?;
    Ok(LossOutcome { value, empty_batch: false })
}

/// Distance between two similarity matrices; exposed separately so the
/// row-shift invariance of the softmax-based distances can be tested
/// directly.
pub fn relation_from_similarity(
    m_s: &Array2<f64>,
    m_t: &Array2<f64>,
    distance: RelationDistance,
) -> Result<f64> {
    if m_s.dim() != m_t.dim() {
        return Err(CoreError::InvalidArgument("similarity shapes differ".into()));
    }
    let n = m_s.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let value = match distance {
        RelationDistance::Kl => {
            let d_s = softmax2(m_s);
            let d_t = softmax2(m_t);
            let mut total = 0.0;
            for (s, t) in d_s.rows().into_iter().zip(d_t.rows()) {
                total += kl_divergence(s, t)?;
            }
            total / n as f64
        }
        RelationDistance::Mse => {
            let d_s = softmax2(m_s);
            let d_t = softmax2(m_t);
            let mut total = 0.0;
            for (s, t) in d_s.rows().into_iter().zip(d_t.rows()) {
                total += s
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            total / n as f64
        }
        RelationDistance::MutualInfo => {
            let d_s = kernel_rows(m_s);
            let d_t = kernel_rows(m_t);
            let mut total = 0.0;
            for (s, t) in d_s.rows().into_iter().zip(d_t.rows()) {
                total += kl_divergence(s, t)?;
            }
            total / n as f64
        }
    };
    Ok(value)
}

/// (cos+1)/2 kernel rows normalized to sum 1.
fn kernel_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut k = m.mapv(|v| (v + 1.0) * 0.5);
    for mut row in k.rows_mut() {
        let s = row.sum().max(LOG_EPS);
        row.mapv_inplace(|v| v / s);
    }
    k
}

/// Symmetric-KL of two probability-row nodes, averaged over rows.
fn sym_kl_mean_node(tape: &Tape, p_s: NodeId, p_t: NodeId, rows: usize) -> NodeId {
    let kl_ts = kl_rows_sum_node(tape, p_t, p_s);
    let kl_st = kl_rows_sum_node(tape, p_s, p_t);
    let sum = tape.add(kl_ts, kl_st);
    tape.scale(sum, 1.0 / rows as f64)
}

/// `sum_ij p_ij (ln p_ij - ln q_ij)` as a tape node.
fn kl_rows_sum_node(tape: &Tape, p: NodeId, q: NodeId) -> NodeId {
    let ln_p = tape.ln_eps(p, LOG_EPS);
    let ln_q = tape.ln_eps(q, LOG_EPS);
    let diff = tape.sub(ln_p, ln_q);
    let prod = tape.mul(p, diff);
    tape.sum_all(prod)
}

/// Tape version of [`prob_distill_loss`] over two probability nodes
/// (rows x C). The caller detaches the teacher side.
pub fn prob_distill_loss_node(tape: &Tape, p_s: NodeId, p_t: NodeId) -> NodeId {
    let rows = tape.shape(p_s)[0];
    assert!(rows > 0, "prob_distill_loss_node: empty batch");
    sym_kl_mean_node(tape, p_s, p_t, rows)
}

/// Tape version of [`relation_distill_loss`] over two embedding nodes
/// (rows x D). The caller detaches the teacher side.
pub fn relation_distill_loss_node(
    tape: &Tape,
    f_s: NodeId,
    f_t: NodeId,
    distance: RelationDistance,
) -> NodeId {
    let rows = tape.shape(f_s)[0];
    assert!(rows > 0, "relation_distill_loss_node: empty batch");
    let m_s = tape.matmul_nt(f_s, f_s);
    let m_t = tape.matmul_nt(f_t, f_t);
    match distance {
        RelationDistance::Kl => {
            let d_s = tape.softmax_rows(m_s);
            let d_t = tape.softmax_rows(m_t);
            let kl = kl_rows_sum_node(tape, d_s, d_t);
            tape.scale(kl, 1.0 / rows as f64)
        }
        RelationDistance::Mse => {
            let d_s = tape.softmax_rows(m_s);
            let d_t = tape.softmax_rows(m_t);
            let diff = tape.sub(d_s, d_t);
            let sq = tape.mul(diff, diff);
            let sum = tape.sum_all(sq);
            tape.scale(sum, 1.0 / rows as f64)
        }
        RelationDistance::MutualInfo => {
            let k_s = kernel_rows_node(tape, m_s);
            let k_t = kernel_rows_node(tape, m_t);
            let kl = kl_rows_sum_node(tape, k_s, k_t);
            tape.scale(kl, 1.0 / rows as f64)
        }
    }
}

fn kernel_rows_node(tape: &Tape, m: NodeId) -> NodeId {
    let shifted = tape.add_scalar(m, 1.0);
    let k = tape.scale(shifted, 0.5);
    tape.normalize_rows_sum(k)
}
