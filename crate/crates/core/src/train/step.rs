//! One optimization step: forward through both stages and both ReID heads,
//! loss composition, backpropagation, the SGD update, and the OIM state
//! refresh.

use ndarray::{Array2, Array3, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{IdentityIndex, TrainConfig};
use crate::autograd::{NodeId, Tape};
use crate::error::{CoreError, Result};
use crate::loss::{
    prob_distill_loss_node, relation_distill_loss_node, Branch, EmbeddingBatch, LossReport,
    OimState,
};
use crate::model::boxes::{clip_to_image, decode_deltas_weighted, Box4};
use crate::model::{match_boxes_to_gt, sample_rois, GtBox, SearchModel};
use crate::nn::{ParamStore, Sgd};

/// One batch element.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub image_id: String,
    /// (3,H,W) pixels in [0,1].
    pub pixels: Array3<f64>,
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    pub num_rois: usize,
    pub num_labeled: usize,
}

/// Accumulates `weight * node` terms into a single scalar loss node.
struct LossAccumulator<'t> {
    tape: &'t Tape,
    total: Option<NodeId>,
}

impl<'t> LossAccumulator<'t> {
    fn new(tape: &'t Tape) -> Self {
        LossAccumulator { tape, total: None }
    }

    fn add(&mut self, node: NodeId, weight: f64) -> f64 {
        let value = self.tape.scalar(node);
        let term = if weight == 1.0 { node } else { self.tape.scale(node, weight) };
        self.total = Some(match self.total {
            Some(t) => self.tape.add(t, term),
            None => term,
        });
        value
    }
}

#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &SearchModel,
    store: &mut ParamStore,
    optimizer: &mut Sgd,
    oim_student: &mut OimState,
    mut oim_teacher: Option<&mut OimState>,
    identity_index: &IdentityIndex,
    config: &TrainConfig,
    batch: &[TrainImage],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let weights = config.loss_weights();
    let tape = Tape::new();
    let pixels: Vec<Array3<f64>> = batch.iter().map(|b| b.pixels.clone()).collect();
    let normalized = model.normalize_images(&pixels)?;
    let (_, _, h, w) = normalized.dim();
    let image_size = (w as f64, h as f64);

    let fm = model.backbone_forward(&tape, store, &normalized)?;
    let gt_boxes: Vec<Vec<Box4>> =
        batch.iter().map(|b| b.gts.iter().map(|g| g.bbox).collect()).collect();
    let rpn_out = model.propose_regions(
        &tape,
        store,
        &fm,
        image_size,
        Some(&gt_boxes),
        rng,
    )?;
    let (rpn_obj_node, rpn_reg_node) = rpn_out.losses.expect("training RPN always has losses");

    let mut acc = LossAccumulator::new(&tape);
    let l_rpn_obj = acc.add(rpn_obj_node, 1.0);
    let l_rpn_reg = acc.add(rpn_reg_node, 1.0);

    // refinement-stage RoIs: sampled proposals plus ground truth
    let mut rois: Vec<(usize, Box4)> = Vec::new();
    for (img_idx, proposals) in rpn_out.proposals.iter().enumerate() {
        for b in sample_rois(proposals, &batch[img_idx].gts, &model.config, image_size, rng) {
            rois.push((img_idx, b));
        }
    }

    let mut l_cls1 = 0.0;
    let mut l_reg1 = 0.0;
    let mut l_cls2 = 0.0;
    let mut l_reg2 = 0.0;
    let mut l_oim_s = 0.0;
    let mut l_oim_t = 0.0;
    let mut l_prob = 0.0;
    let mut l_rela = 0.0;
    let mut num_labeled = 0;
    let mut state_updates: Vec<(Branch, Array2<f64>, Vec<i64>)> = Vec::new();

    if !rois.is_empty() {
        // stage 1: detection head over sampled proposals
        let targets1 = {
            let boxes: Vec<Box4> = rois.iter().map(|&(_, b)| b).collect();
            per_image_match(&rois, &boxes, batch, model.config.roi_fg_iou)
        };
        let pooled1 = model.pool_rois(&tape, &fm, &rois)?;
        let det_out = model.detection_head_forward(&tape, store, pooled1);
        let cls1 = tape.cross_entropy_rows(det_out.cls_logits, &targets1.cls_labels);
        l_cls1 = acc.add(cls1, weights.k_cls1);
        if let Some(reg_node) =
            regression_loss(&tape, det_out.deltas, &targets1.reg_targets, rois.len())
        {
            l_reg1 = acc.add(reg_node, weights.k_reg1);
        }

        // stage 2: boxes refined by the detection head feed the ReID heads
        let deltas1 = tape.value(det_out.deltas).into_dimensionality::<Ix2>().unwrap();
        let refined: Vec<(usize, Box4)> = rois
            .iter()
            .zip(deltas1.rows())
            .map(|(&(img, roi), d)| {
                let decoded = clip_to_image(
                    &decode_deltas_weighted(&roi, &[d[0], d[1], d[2], d[3]]),
                    image_size.0,
                    image_size.1,
                );
                // degenerate refinements fall back to the unrefined box
                if decoded[2] - decoded[0] >= 1.0 && decoded[3] - decoded[1] >= 1.0 {
                    (img, decoded)
                } else {
                    (img, roi)
                }
            })
            .collect();
        // ground-truth boxes join the refinement stage so labeled persons
        // are present from the first step
        let mut refined = refined;
        for (img_idx, b) in batch.iter().enumerate() {
            for gt in &b.gts {
                refined.push((img_idx, gt.bbox));
            }
        }
        let targets2 = {
            let boxes: Vec<Box4> = refined.iter().map(|&(_, b)| b).collect();
            per_image_match(&refined, &boxes, batch, model.config.roi_fg_iou)
        };

        let pooled2 = model.pool_rois(&tape, &fm, &refined)?;
        let student = model.reid_head_forward(&tape, store, Branch::Student, pooled2);
        let cls2 = tape.cross_entropy_rows(student.cls_logits.unwrap(), &targets2.cls_labels);
        l_cls2 = acc.add(cls2, weights.k_cls2);
        if let Some(reg_node) = regression_loss(
            &tape,
            student.deltas.unwrap(),
            &targets2.reg_targets,
            refined.len(),
        ) {
            l_reg2 = acc.add(reg_node, weights.k_reg2);
        }

        // identity targets mapped onto dense OIM classes
        let mapped: Vec<i64> = targets2
            .identities
            .iter()
            .map(|&id| identity_index.class_of(id).map(|c| c as i64).unwrap_or(-1))
            .collect();
        let fg_rows: Vec<usize> =
            (0..refined.len()).filter(|&i| targets2.foreground[i]).collect();
        let labeled_rows: Vec<usize> = fg_rows
            .iter()
            .copied()
            .filter(|&i| mapped[i] >= 0)
            .collect();
        let labels: Vec<usize> = labeled_rows.iter().map(|&i| mapped[i] as usize).collect();
        num_labeled = labels.len();

        let teacher = model.has_teacher().then(|| {
            let teacher_input = if config.detach_teacher {
                model.detach_features(&tape, pooled2)
            } else {
                pooled2
            };
            model.reid_head_forward(&tape, store, Branch::Teacher, teacher_input)
        });

        if !fg_rows.is_empty() {
            let fg_ids: Vec<i64> = fg_rows.iter().map(|&i| mapped[i]).collect();
            let emb_s_fg = tape.select_rows(student.embeddings, &fg_rows);
            if let Some(node) = oim_student.loss_node(
                &tape,
                tape.select_rows(student.embeddings, &labeled_rows),
                &labels,
            ) {
                l_oim_s = acc.add(node, 1.0);
            }
            state_updates.push((
                Branch::Student,
                tape.value(emb_s_fg).into_dimensionality::<Ix2>().unwrap(),
                fg_ids.clone(),
            ));

            if let (Some(teacher_out), Some(oim_t)) = (&teacher, oim_teacher.as_deref_mut()) {
                let emb_t_fg = tape.select_rows(teacher_out.embeddings, &fg_rows);
                if let Some(node) = oim_t.loss_node(
                    &tape,
                    tape.select_rows(teacher_out.embeddings, &labeled_rows),
                    &labels,
                ) {
                    l_oim_t = acc.add(node, 1.0);
                }
                state_updates.push((
                    Branch::Teacher,
                    tape.value(emb_t_fg).into_dimensionality::<Ix2>().unwrap(),
                    fg_ids,
                ));
            }
        }

        // distillation over the labeled persons in the batch; the teacher
        // side is detached so it keeps training on OIM alone
        if let Some(teacher_out) = &teacher {
            if !labeled_rows.is_empty() {
                let emb_s = tape.select_rows(student.embeddings, &labeled_rows);
                let emb_t_sel = tape.select_rows(teacher_out.embeddings, &labeled_rows);
                let emb_t = tape.detach(emb_t_sel);
                if config.enable_prob_kd {
                    let p_s = oim_student.probabilities_node(&tape, emb_s);
                    let p_t = oim_teacher
                        .as_deref()
                        .expect("teacher OIM state must exist alongside the teacher head")
                        .probabilities_node(&tape, emb_t);
                    let node = prob_distill_loss_node(&tape, p_s, p_t);
                    l_prob = acc.add(node, weights.lambda_prob);
                }
                if config.enable_rela_kd {
                    let node = relation_distill_loss_node(
                        &tape,
                        emb_s,
                        emb_t,
                        config.relation_distance,
                    );
                    l_rela = acc.add(node, weights.lambda_rela);
                }
            }
        }
    }

    let total_node = acc.total.expect("at least the RPN losses are present");
    let total_value = tape.scalar(total_node);
    if !total_value.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|b| b.image_id.as_str()).collect();
        return Err(CoreError::Numeric(format!(
            "non-finite total loss {total_value}; aborting step for batch {ids:?}"
        )));
    }

    let grads = tape.backward(total_node);
    optimizer.step(store, &grads, lr, config.grad_clip_norm);

    // single OIM refresh per step, after backprop saw a consistent snapshot
    for (branch, emb, ids) in state_updates {
        let batch = EmbeddingBatch::new(emb, ids, branch)?;
        match branch {
            Branch::Student => {
                oim_student.update(&batch);
            }
            Branch::Teacher => {
                oim_teacher.as_deref_mut().unwrap().update(&batch);
            }
        }
    }

    let report = LossReport::compose(
        l_prob, l_rela, l_rpn_obj, l_rpn_reg, l_reg1, l_cls1, l_reg2, l_cls2, l_oim_s,
        l_oim_t, weights,
    )?;
    Ok(StepOutcome { report, num_rois: rois.len(), num_labeled })
}

/// Match (image, box) pairs against their image's ground truth.
fn per_image_match(
    rois: &[(usize, Box4)],
    boxes: &[Box4],
    batch: &[TrainImage],
    fg_iou: f64,
) -> crate::model::BoxTargets {
    let mut cls_labels = Vec::with_capacity(rois.len());
    let mut reg_targets = Vec::with_capacity(rois.len());
    let mut identities = Vec::with_capacity(rois.len());
    let mut foreground = Vec::with_capacity(rois.len());
    for (&(img, _), b) in rois.iter().zip(boxes) {
        let t = match_boxes_to_gt(std::slice::from_ref(b), &batch[img].gts, fg_iou);
        cls_labels.push(t.cls_labels[0]);
        reg_targets.push(t.reg_targets[0]);
        identities.push(t.identities[0]);
        foreground.push(t.foreground[0]);
    }
    crate::model::BoxTargets { cls_labels, reg_targets, identities, foreground }
}

/// Smooth-L1 regression over foreground rows, normalized by the total RoI
/// count. Returns `None` when there are no foreground rows.
fn regression_loss(
    tape: &Tape,
    deltas: NodeId,
    reg_targets: &[Option<[f64; 4]>],
    total_rois: usize,
) -> Option<NodeId> {
    let fg: Vec<usize> = (0..reg_targets.len()).filter(|&i| reg_targets[i].is_some()).collect();
    if fg.is_empty() {
        return None;
    }
    let mut target = Array2::zeros((fg.len(), 4));
    for (row, &i) in fg.iter().enumerate() {
        let t = reg_targets[i].unwrap();
        for k in 0..4 {
            target[[row, k]] = t[k];
        }
    }
    let selected = tape.select_rows(deltas, &fg);
    let sl1 = tape.smooth_l1_sum(selected, &target.into_dyn(), 1.0);
    Some(tape.scale(sl1, 1.0 / total_rois as f64))
}
