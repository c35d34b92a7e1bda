//! Online instance matching: a momentum-updated lookup table of identity
//! prototypes plus a circular queue of unlabeled-person embeddings acting as
//! extra negatives.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingBatch, ProbabilityBatch};
use crate::autograd::{NodeId, Tape};
use crate::error::{CoreError, Result};

/// Mutable state of one OIM classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OimState {
    lut: Array2<f64>,
    queue: Array2<f64>,
    /// Occupied queue rows; only these act as negatives.
    queue_len: usize,
    /// Next write position (wraps FIFO once full).
    cursor: usize,
    /// Lookup-table momentum (gamma).
    pub momentum: f64,
    /// Softmax temperature (tau); logits are similarities divided by tau.
    pub temperature: f64,
}

/// Loss value plus bookkeeping for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OimOutcome {
    pub loss: f64,
    /// Labeled samples that contributed to the loss; 0 flags an all-unlabeled
    /// batch whose loss contribution is 0 (not NaN).
    pub labeled: usize,
    pub pushed_unlabeled: usize,
}

impl OimState {
    /// Fresh state with seeded random unit-vector prototypes.
    pub fn new<R: Rng>(
        rng: &mut R,
        num_classes: usize,
        dim: usize,
        queue_size: usize,
        momentum: f64,
        temperature: f64,
    ) -> Self {
        assert!(num_classes > 0, "OIM needs at least one identity class");
        assert!(temperature > 0.0 && momentum > 0.0 && momentum < 1.0);
        let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
        let mut lut = Array2::from_shape_fn((num_classes, dim), |_| normal.sample(rng));
        for mut row in lut.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        OimState {
            lut,
            queue: Array2::zeros((queue_size, dim)),
            queue_len: 0,
            cursor: 0,
            momentum,
            temperature,
        }
    }

    /// State with an explicit lookup table (rows must be unit-norm).
    pub fn from_parts(
        lut: Array2<f64>,
        queue_size: usize,
        momentum: f64,
        temperature: f64,
    ) -> Result<Self> {
        for (i, row) in lut.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > super::UNIT_NORM_TOL {
                return Err(CoreError::InvalidArgument(format!(
                    "lut row {i} has norm {n}, expected 1"
                )));
            }
        }
        let dim = lut.ncols();
        Ok(OimState {
            lut,
            queue: Array2::zeros((queue_size, dim)),
            queue_len: 0,
            cursor: 0,
            momentum,
            temperature,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.lut.nrows()
    }

    pub fn dim(&self) -> usize {
        self.lut.ncols()
    }

    pub fn queue_capacity(&self) -> usize {
        self.queue.nrows()
    }

    pub fn queue_len(&self) -> usize {
        self.queue_len
    }

    pub fn lut(&self) -> &Array2<f64> {
        &self.lut
    }

    /// Occupied queue rows in storage order.
    pub fn queue_occupied(&self) -> Array2<f64> {
        self.queue.slice(ndarray::s![..self.queue_len, ..]).to_owned()
    }

    /// LUT with the occupied queue rows appended: the full negative set.
    pub fn reference_matrix(&self) -> Array2<f64> {
        if self.queue_len == 0 {
            self.lut.clone()
        } else {
            concatenate(
                Axis(0),
                &[self.lut.view(), self.queue.slice(ndarray::s![..self.queue_len, ..])],
            )
            .unwrap()
        }
    }

    fn check_batch(&self, batch: &EmbeddingBatch) -> Result<()> {
        if batch.dim() != self.dim() && !batch.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "embedding dim {} does not match OIM dim {}",
                batch.dim(),
                self.dim()
            )));
        }
        for &id in batch.identities() {
            if id >= self.num_classes() as i64 {
                return Err(CoreError::InvalidArgument(format!(
                    "label {id} out of range for {} classes",
                    self.num_classes()
                )));
            }
        }
        Ok(())
    }

    /// Class probabilities over the C labeled identities only (the queue is
    /// excluded from the distillation support).
    pub fn probabilities(&self, batch: &EmbeddingBatch) -> Result<ProbabilityBatch> {
        self.check_batch(batch)?;
        let logits = batch.embeddings().dot(&self.lut.t()) / self.temperature;
        ProbabilityBatch::new(crate::autograd::softmax2(&logits))
    }

    /// Mean softmax cross-entropy of labeled samples over the C+Q similarity
    /// logits, then the state update: momentum refresh of the matched LUT
    /// rows and a FIFO push of every unlabeled embedding.
    pub fn loss_and_update(&mut self, batch: &EmbeddingBatch) -> Result<OimOutcome> {
        self.check_batch(batch)?;
        let loss = self.loss_only(batch)?;
        let pushed = self.update(batch);
        Ok(OimOutcome {
            loss: loss.loss,
            labeled: loss.labeled,
            pushed_unlabeled: pushed,
        })
    }

    /// The loss without the state update (the trainer updates after
    /// backpropagation so gradients see a consistent snapshot).
    pub fn loss_only(&self, batch: &EmbeddingBatch) -> Result<OimOutcome> {
        self.check_batch(batch)?;
        let reference = self.reference_matrix();
        let mut loss = 0.0;
        let mut labeled = 0usize;
        for (row, &id) in batch.embeddings().rows().into_iter().zip(batch.identities()) {
            if id < 0 {
                continue;
            }
            let logits: Array1<f64> = reference.dot(&row) / self.temperature;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - logits[id as usize];
            labeled += 1;
        }
        Ok(OimOutcome {
            loss: if labeled == 0 { 0.0 } else { loss / labeled as f64 },
            labeled,
            pushed_unlabeled: 0,
        })
    }

    /// Apply the post-step state mutation; returns how many unlabeled
    /// embeddings were pushed.
    pub fn update(&mut self, batch: &EmbeddingBatch) -> usize {
        let mut pushed = 0;
        for (row, &id) in batch.embeddings().rows().into_iter().zip(batch.identities()) {
            if id >= 0 {
                let mut lut_row = self.lut.row_mut(id as usize);
                let g = self.momentum;
                ndarray::Zip::from(&mut lut_row).and(&row).for_each(|l, &x| {
                    *l = g * *l + (1.0 - g) * x;
                });
                let n = lut_row.dot(&lut_row).sqrt().max(1e-12);
                lut_row.mapv_inplace(|v| v / n);
            } else if self.queue_capacity() > 0 {
                let slot = self.cursor;
                self.queue.row_mut(slot).assign(&row);
                self.cursor = (self.cursor + 1) % self.queue_capacity();
                self.queue_len = (self.queue_len + 1).min(self.queue_capacity());
                pushed += 1;
            }
        }
        pushed
    }

    /// Tape node for the class probabilities of `emb` (rows x C), used by the
    /// distillation losses during training.
    pub fn probabilities_node(&self, tape: &Tape, emb: NodeId) -> NodeId {
        let lut = tape.constant(self.lut.clone().into_dyn());
        let sims = tape.matmul_nt(emb, lut);
        let logits = tape.scale(sims, 1.0 / self.temperature);
        tape.softmax_rows(logits)
    }

    /// Tape node for the OIM loss of already-labeled rows (`labels[i]` in
    /// `[0, C)`). Returns `None` for an empty batch.
    pub fn loss_node(&self, tape: &Tape, emb: NodeId, labels: &[usize]) -> Option<NodeId> {
        if labels.is_empty() {
            return None;
        }
        let reference = tape.constant(self.reference_matrix().into_dyn());
        let sims = tape.matmul_nt(emb, reference);
        let logits = tape.scale(sims, 1.0 / self.temperature);
        Some(tape.cross_entropy_rows(logits, labels))
    }
}
