//! Region proposal network: dense anchor classification/regression on the
//! backbone feature map, with seeded target sampling during training.

use ndarray::{Array1, Ix4};
use rand::seq::SliceRandom;
use rand::Rng;

use super::boxes::{clip_to_image, decode_deltas, encode_deltas, iou_xyxy, nms, Box4};
use crate::autograd::{NodeId, Tape};
use crate::error::{CoreError, Result};
use crate::nn::{Conv2d, ParamStore};

pub struct Rpn {
    conv: Conv2d,
    obj: Conv2d,
    reg: Conv2d,
    pub anchor_sizes: Vec<f64>,
    pub anchor_aspects: Vec<f64>,
}

/// Fraction of sampled RPN anchors that may be positive.
const RPN_POS_FRACTION: f64 = 0.5;
const RPN_BATCH_PER_IMAGE: usize = 64;
const RPN_POS_IOU: f64 = 0.5;
const RPN_NEG_IOU: f64 = 0.3;
const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

pub struct RpnOutput {
    /// Per image: proposal boxes (xyxy) in rank order.
    pub proposals: Vec<Vec<Box4>>,
    /// Per image: objectness score of each proposal.
    pub objectness: Vec<Vec<f64>>,
    /// (objectness loss, regression loss) when training targets were given.
    pub losses: Option<(NodeId, NodeId)>,
}

impl Rpn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        anchor_sizes: Vec<f64>,
        anchor_aspects: Vec<f64>,
    ) -> Self {
        let num_anchors = anchor_sizes.len() * anchor_aspects.len();
        Rpn {
            conv: Conv2d::new(store, rng, "rpn.conv", channels, channels, 3, 1, 1),
            obj: Conv2d::new_scaled(store, rng, "rpn.obj", channels, num_anchors, 1, 1, 0, 0.01),
            reg: Conv2d::new_scaled(store, rng, "rpn.reg", channels, 4 * num_anchors, 1, 1, 0, 0.01),
            anchor_sizes,
            anchor_aspects,
        }
    }

    pub fn num_anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_aspects.len()
    }

    /// Anchor boxes for an `h x w` feature grid at `stride`, ordered
    /// (anchor, y, x) to match the output map layout.
    pub fn anchors(&self, h: usize, w: usize, stride: usize) -> Vec<Box4> {
        let mut shapes = Vec::new();
        for &size in &self.anchor_sizes {
            for &aspect in &self.anchor_aspects {
                let aw = size / aspect.sqrt();
                let ah = size * aspect.sqrt();
                shapes.push((aw, ah));
            }
        }
        let mut out = Vec::with_capacity(shapes.len() * h * w);
        for &(aw, ah) in &shapes {
            for y in 0..h {
                for x in 0..w {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    out.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
                }
            }
        }
        out
    }

    /// Run the RPN over a feature map. With `targets`, sampled objectness and
    /// regression losses are attached. Proposal decoding happens on values
    /// (no gradients flow through box coordinates).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        tape: &Tape,
        store: &ParamStore,
        features: NodeId,
        stride: usize,
        image_size: (f64, f64),
        pre_nms_top_n: usize,
        post_nms_top_n: usize,
        nms_threshold: f64,
        targets: Option<&[Vec<Box4>]>,
        rng: &mut R,
    ) -> Result<RpnOutput> {
        let hidden = tape.relu(self.conv.forward(tape, store, features));
        let obj_map = self.obj.forward(tape, store, hidden);
        let reg_map = self.reg.forward(tape, store, hidden);

        let obj_shape = tape.shape(obj_map);
        let (batch, a, h, w) = (obj_shape[0], obj_shape[1], obj_shape[2], obj_shape[3]);
        if h == 0 || w == 0 {
            return Err(CoreError::Config(format!(
                "degenerate feature map {h}x{w}: no anchors can be generated"
            )));
        }
        let anchors = self.anchors(h, w, stride);
        debug_assert_eq!(anchors.len(), a * h * w);

        let obj_vals = tape.value(obj_map).into_dimensionality::<Ix4>().unwrap();
        let reg_vals = tape.value(reg_map).into_dimensionality::<Ix4>().unwrap();

        // index helpers over the (anchor, y, x) flattening
        let coord_of = |idx: usize| -> (usize, usize, usize) {
            let ai = idx / (h * w);
            let rem = idx % (h * w);
            (ai, rem / w, rem % w)
        };

        let mut proposals = Vec::with_capacity(batch);
        let mut objectness = Vec::with_capacity(batch);
        for n in 0..batch {
            let mut scored: Vec<(usize, f64)> = (0..anchors.len())
                .map(|i| {
                    let (ai, y, x) = coord_of(i);
                    (i, obj_vals[[n, ai, y, x]])
                })
                .collect();
            scored.sort_by(|l, r| {
                r.1.partial_cmp(&l.1).unwrap_or(std::cmp::Ordering::Equal).then(l.0.cmp(&r.0))
            });
            scored.truncate(pre_nms_top_n);
            let decoded: Vec<Box4> = scored
                .iter()
                .map(|&(i, _)| {
                    let (ai, y, x) = coord_of(i);
                    let d = [
                        reg_vals[[n, 4 * ai, y, x]],
                        reg_vals[[n, 4 * ai + 1, y, x]],
                        reg_vals[[n, 4 * ai + 2, y, x]],
                        reg_vals[[n, 4 * ai + 3, y, x]],
                    ];
                    clip_to_image(&decode_deltas(&anchors[i], &d), image_size.0, image_size.1)
                })
                .collect();
            let scores: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
            // drop degenerate boxes before NMS
            let valid: Vec<usize> = (0..decoded.len())
                .filter(|&i| decoded[i][2] - decoded[i][0] >= 1.0 && decoded[i][3] - decoded[i][1] >= 1.0)
                .collect();
            let vboxes: Vec<Box4> = valid.iter().map(|&i| decoded[i]).collect();
            let vscores: Vec<f64> = valid.iter().map(|&i| scores[i]).collect();
            let keep = nms(&vboxes, &vscores, nms_threshold);
            let keep = &keep[..keep.len().min(post_nms_top_n)];
            proposals.push(keep.iter().map(|&i| vboxes[i]).collect());
            objectness.push(keep.iter().map(|&i| vscores[i]).collect());
        }

        let losses = if let Some(targets) = targets {
            assert_eq!(targets.len(), batch, "target count mismatch");
            let mut sampled_coords: Vec<[usize; 4]> = Vec::new();
            let mut sampled_labels: Vec<f64> = Vec::new();
            let mut pos_coords: Vec<[usize; 4]> = Vec::new();
            let mut pos_targets: Vec<f64> = Vec::new();
            for n in 0..batch {
                let assignment = assign_rpn_targets(&anchors, &targets[n], rng);
                for (idx, label) in assignment.sampled {
                    let (ai, y, x) = coord_of(idx);
                    sampled_coords.push([n, ai, y, x]);
                    sampled_labels.push(label);
                    if label > 0.5 {
                        let gt = assignment.matched_gt[&idx];
                        let deltas = encode_deltas(&anchors[idx], &targets[n][gt]);
                        for (k, d) in deltas.iter().enumerate() {
                            pos_coords.push([n, 4 * ai + k, y, x]);
                            pos_targets.push(*d);
                        }
                    }
                }
            }
            let obj_loss = if sampled_coords.is_empty() {
                tape.constant(crate::autograd::scalar_array(0.0))
            } else {
                let logits = tape.gather_nchw(obj_map, &sampled_coords);
                tape.bce_with_logits_mean(logits, &Array1::from_vec(sampled_labels))
            };
            let reg_loss = if pos_coords.is_empty() {
                tape.constant(crate::autograd::scalar_array(0.0))
            } else {
                let preds = tape.gather_nchw(reg_map, &pos_coords);
                let n_samples = (sampled_coords.len().max(1)) as f64;
                let sl1 = tape.smooth_l1_sum(
                    preds,
                    &Array1::from_vec(pos_targets).into_dyn(),
                    RPN_SMOOTH_L1_BETA,
                );
                tape.scale(sl1, 1.0 / n_samples)
            };
            Some((obj_loss, reg_loss))
        } else {
            None
        };

        Ok(RpnOutput { proposals, objectness, losses })
    }
}

struct RpnAssignment {
    /// (anchor index, 0/1 label) for the sampled training anchors.
    sampled: Vec<(usize, f64)>,
    /// Matched GT index for positive anchors.
    matched_gt: std::collections::BTreeMap<usize, usize>,
}

fn assign_rpn_targets<R: Rng>(
    anchors: &[Box4],
    gts: &[Box4],
    rng: &mut R,
) -> RpnAssignment {
    let mut labels: Vec<i8> = vec![-1; anchors.len()]; // -1 ignore, 0 neg, 1 pos
    let mut matched_gt = std::collections::BTreeMap::new();

    if gts.is_empty() {
        // everything stays background-eligible
        for l in labels.iter_mut() {
            *l = 0;
        }
    } else {
        let mut best_anchor_per_gt: Vec<(usize, f64)> = vec![(0, -1.0); gts.len()];
        for (ai, anchor) in anchors.iter().enumerate() {
            let mut best_iou = 0.0;
            let mut best_gt = None;
            for (gi, gt) in gts.iter().enumerate() {
                let v = iou_xyxy(anchor, gt);
                if v > best_iou {
                    best_iou = v;
                    best_gt = Some(gi);
                }
                if v > best_anchor_per_gt[gi].1 {
                    best_anchor_per_gt[gi] = (ai, v);
                }
            }
            if best_iou >= RPN_POS_IOU {
                labels[ai] = 1;
                matched_gt.insert(ai, best_gt.unwrap());
            } else if best_iou < RPN_NEG_IOU {
                labels[ai] = 0;
            }
        }
        // the best anchor for each GT is always positive
        for (gi, &(ai, iou)) in best_anchor_per_gt.iter().enumerate() {
            if iou > 0.0 {
                labels[ai] = 1;
                matched_gt.insert(ai, gi);
            }
        }
    }

    let mut positives: Vec<usize> =
        labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
    let mut negatives: Vec<usize> =
        labels.iter().enumerate().filter(|(_, &l)| l == 0).map(|(i, _)| i).collect();
    positives.shuffle(rng);
    negatives.shuffle(rng);
    let num_pos = positives.len().min((RPN_BATCH_PER_IMAGE as f64 * RPN_POS_FRACTION) as usize);
    let num_neg = negatives.len().min(RPN_BATCH_PER_IMAGE - num_pos);
    let mut sampled: Vec<(usize, f64)> = Vec::with_capacity(num_pos + num_neg);
    sampled.extend(positives.into_iter().take(num_pos).map(|i| (i, 1.0)));
    sampled.extend(negatives.into_iter().take(num_neg).map(|i| (i, 0.0)));
    sampled.sort_by_key(|&(i, _)| i);
    RpnAssignment { sampled, matched_gt }
}
