//! The end-to-end person-search network: backbone, region proposals,
//! detection-head refinement, RoI pooling, and dual (student/teacher) ReID
//! heads. The teacher consumes gradient-detached RoI features and exists
//! only at training time; inference runs purely through the student branch.

mod backbone;
pub mod boxes;
mod heads;
mod rpn;

pub use backbone::{Backbone, BackboneSpec};
pub use heads::{DetectionHead, DetectionHeadOutput, ReidHead, ReidHeadOutput};
pub use rpn::{Rpn, RpnOutput};

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array3, Array4, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Roi, Tape};
use crate::data::BoundingBox;
use crate::error::{CoreError, Result};
use crate::loss::Branch;
use crate::nn::{ParamId, ParamStore};
use boxes::{clip_to_image, decode_deltas_weighted, encode_deltas_weighted, iou_xyxy, nms, Box4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// RoI-Align output size P (features are P x P per box).
    pub pool_size: usize,
    /// ReID embedding width.
    pub embedding_dim: usize,
    /// ReID head trunk channels.
    pub head_channels: usize,
    /// Detection head MLP width.
    pub det_head_hidden: usize,
    pub anchor_sizes: Vec<f64>,
    /// Anchor h/w ratios (persons are tall).
    pub anchor_aspects: Vec<f64>,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_post_nms_top_n: usize,
    pub rpn_nms_threshold: f64,
    /// RoIs sampled per image for the refinement stage during training.
    pub roi_batch_size: usize,
    pub roi_fg_fraction: f64,
    /// IoU at or above which a box adopts a ground-truth identity.
    pub roi_fg_iou: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    /// Build the teacher branch (disable for the plain baseline model).
    pub with_teacher: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale configuration around the tiny backbone.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneSpec::tiny_default(),
            pool_size: 6,
            embedding_dim: 256,
            head_channels: 64,
            det_head_hidden: 128,
            anchor_sizes: vec![8.0, 16.0, 32.0],
            anchor_aspects: vec![1.0, 2.0],
            rpn_pre_nms_top_n: 200,
            rpn_post_nms_top_n: 32,
            rpn_nms_threshold: 0.7,
            roi_batch_size: 24,
            roi_fg_fraction: 0.5,
            roi_fg_iou: 0.5,
            score_threshold: 0.5,
            nms_threshold: 0.45,
            max_detections: 50,
            normalize_mean: [0.5, 0.5, 0.5],
            normalize_std: [0.5, 0.5, 0.5],
            with_teacher: true,
        }
    }

    /// Full-scale configuration around the residual backbone.
    pub fn full() -> Self {
        ModelConfig {
            backbone: BackboneSpec::residual_default(),
            pool_size: 7,
            head_channels: 256,
            det_head_hidden: 512,
            anchor_sizes: vec![16.0, 32.0, 64.0, 128.0],
            rpn_pre_nms_top_n: 2000,
            rpn_post_nms_top_n: 300,
            roi_batch_size: 128,
            roi_fg_fraction: 0.25,
            ..ModelConfig::tiny()
        }
    }
}

/// Backbone output: a tape node plus its spatial stride.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub node: NodeId,
    pub stride: usize,
}

/// Pooled RoI features plus the boxes they came from and their assigned
/// identities (`-1` for unlabeled persons and background; `foreground`
/// separates the two).
pub struct RoiFeatures {
    pub node: NodeId,
    pub image_indices: Vec<usize>,
    pub boxes: Vec<Box4>,
    pub assigned_identity: Vec<i64>,
    pub foreground: Vec<bool>,
}

/// One final detection from [`SearchModel::inference`].
#[derive(Debug, Clone)]
pub struct InferenceDetection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub embedding: Array1<f64>,
}

pub struct SearchModel {
    pub config: ModelConfig,
    backbone: Backbone,
    rpn: Rpn,
    det_head: DetectionHead,
    student: ReidHead,
    teacher: Option<ReidHead>,
    teacher_calls: AtomicU64,
}

impl SearchModel {
    /// Build the model, registering every parameter under a branch-prefixed
    /// name. The teacher is initialized last so that models built with and
    /// without it share identical weights elsewhere for the same seed.
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(store, &mut rng, &config.backbone);
        let channels = backbone.out_channels();
        let rpn = Rpn::new(
            store,
            &mut rng,
            channels,
            config.anchor_sizes.clone(),
            config.anchor_aspects.clone(),
        );
        let det_head =
            DetectionHead::new(store, &mut rng, channels, config.pool_size, config.det_head_hidden);
        let student = ReidHead::new(
            store,
            &mut rng,
            "student",
            channels,
            config.head_channels,
            config.embedding_dim,
            true,
        );
        let teacher = config.with_teacher.then(|| {
            ReidHead::new(
                store,
                &mut rng,
                "teacher",
                channels,
                config.head_channels,
                config.embedding_dim,
                false,
            )
        });
        SearchModel {
            config,
            backbone,
            rpn,
            det_head,
            student,
            teacher,
            teacher_calls: AtomicU64::new(0),
        }
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn has_teacher(&self) -> bool {
        self.teacher.is_some()
    }

    pub fn teacher_call_count(&self) -> u64 {
        self.teacher_calls.load(Ordering::Relaxed)
    }

    /// Parameters belonging to the teacher head.
    pub fn teacher_param_ids(&self, store: &ParamStore) -> BTreeSet<ParamId> {
        store.ids().filter(|&id| store.name(id).starts_with("teacher.")).collect()
    }

    /// Names of every parameter the inference path can touch.
    pub fn inference_param_names(store: &ParamStore) -> BTreeSet<String> {
        store
            .ids()
            .filter(|&id| !store.name(id).starts_with("teacher."))
            .map(|id| store.name(id).to_string())
            .collect()
    }

    /// Stack same-sized images into a normalized NCHW batch.
    pub fn normalize_images(&self, images: &[Array3<f64>]) -> Result<Array4<f64>> {
        if images.is_empty() {
            return Err(CoreError::InvalidArgument("empty image batch".into()));
        }
        let dim = images[0].dim();
        for img in images {
            if img.dim() != dim {
                return Err(CoreError::InvalidArgument(format!(
                    "mixed image sizes in batch: {:?} vs {:?}",
                    img.dim(),
                    dim
                )));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Numeric("non-finite pixel value".into()));
            }
        }
        let (c, h, w) = dim;
        let mut out = Array4::zeros((images.len(), c, h, w));
        for (n, img) in images.iter().enumerate() {
            for ci in 0..c {
                let mean = self.config.normalize_mean[ci];
                let std = self.config.normalize_std[ci];
                out.index_axis_mut(ndarray::Axis(0), n)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .assign(&img.index_axis(ndarray::Axis(0), ci).mapv(|v| (v - mean) / std));
            }
        }
        Ok(out)
    }

    /// Backbone features of a normalized batch.
    pub fn backbone_forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        batch: &Array4<f64>,
    ) -> Result<FeatureMap> {
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite input to backbone".into()));
        }
        let x = tape.constant(batch.clone().into_dyn());
        let node = self.backbone.forward(tape, store, x);
        Ok(FeatureMap { node, stride: self.backbone.stride() })
    }

    /// Region proposals (plus RPN losses when `targets` is given).
    #[allow(clippy::too_many_arguments)]
    pub fn propose_regions<R: Rng>(
        &self,
        tape: &Tape,
        store: &ParamStore,
        fm: &FeatureMap,
        image_size: (f64, f64),
        targets: Option<&[Vec<Box4>]>,
        rng: &mut R,
    ) -> Result<RpnOutput> {
        self.rpn.forward(
            tape,
            store,
            fm.node,
            fm.stride,
            image_size,
            self.config.rpn_pre_nms_top_n,
            self.config.rpn_post_nms_top_n,
            self.config.rpn_nms_threshold,
            targets,
            rng,
        )
    }

    /// RoI-Align `(image index, box)` pairs out of the feature map.
    pub fn pool_rois(
        &self,
        tape: &Tape,
        fm: &FeatureMap,
        rois: &[(usize, Box4)],
    ) -> Result<NodeId> {
        for (_, b) in rois {
            if b[2] - b[0] <= 0.0 || b[3] - b[1] <= 0.0 {
                return Err(CoreError::InvalidArgument(format!(
                    "zero-area roi [{}, {}, {}, {}]",
                    b[0], b[1], b[2], b[3]
                )));
            }
        }
        let rois: Vec<Roi> = rois
            .iter()
            .map(|&(batch, b)| Roi { batch, x1: b[0], y1: b[1], x2: b[2], y2: b[3] })
            .collect();
        Ok(tape.roi_align(fm.node, &rois, self.config.pool_size, 1.0 / fm.stride as f64))
    }

    pub fn detection_head_forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        rois: NodeId,
    ) -> DetectionHeadOutput {
        self.det_head.forward(tape, store, rois)
    }

    /// Forward one ReID head. Teacher invocations are counted so inference
    /// purity is checkable.
    pub fn reid_head_forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        branch: Branch,
        rois: NodeId,
    ) -> ReidHeadOutput {
        match branch {
            Branch::Student => self.student.forward(tape, store, rois),
            Branch::Teacher => {
                self.teacher_calls.fetch_add(1, Ordering::Relaxed);
                self.teacher
                    .as_ref()
                    .expect("model built without a teacher head")
                    .forward(tape, store, rois)
            }
        }
    }

    /// Gradient-blocked view of RoI features for the teacher branch; values
    /// are bitwise identical.
    pub fn detach_features(&self, tape: &Tape, rois: NodeId) -> NodeId {
        tape.detach(rois)
    }

    /// Student embeddings for known boxes in one image (used to embed
    /// annotated query boxes).
    pub fn embed_boxes(
        &self,
        store: &ParamStore,
        pixels: &Array3<f64>,
        boxes: &[Box4],
    ) -> Result<ndarray::Array2<f64>> {
        let batch = self.normalize_images(std::slice::from_ref(pixels))?;
        let tape = Tape::no_grad();
        let fm = self.backbone_forward(&tape, store, &batch)?;
        let rois: Vec<(usize, Box4)> = boxes.iter().map(|&b| (0, b)).collect();
        let pooled = self.pool_rois(&tape, &fm, &rois)?;
        let out = self.reid_head_forward(&tape, store, Branch::Student, pooled);
        Ok(tape.value(out.embeddings).into_dimensionality::<Ix2>().unwrap())
    }

    /// Student-only detection + embedding pass over a batch of images.
    pub fn inference(
        &self,
        store: &ParamStore,
        images: &[Array3<f64>],
    ) -> Result<Vec<Vec<InferenceDetection>>> {
        let batch = self.normalize_images(images)?;
        let (_, _, h, w) = batch.dim();
        let image_size = (w as f64, h as f64);
        let tape = Tape::no_grad();
        let fm = self.backbone_forward(&tape, store, &batch)?;
        // proposal decoding is deterministic; the rng is never touched in
        // eval (no targets)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rpn_out = self.propose_regions(&tape, store, &fm, image_size, None, &mut rng)?;

        let mut results = Vec::with_capacity(images.len());
        for (img_idx, proposals) in rpn_out.proposals.iter().enumerate() {
            if proposals.is_empty() {
                results.push(Vec::new());
                continue;
            }
            let rois: Vec<(usize, Box4)> = proposals.iter().map(|&b| (img_idx, b)).collect();
            let pooled = self.pool_rois(&tape, &fm, &rois)?;
            let det_out = self.detection_head_forward(&tape, store, pooled);
            let deltas = tape.value(det_out.deltas).into_dimensionality::<Ix2>().unwrap();
            let cls1 = tape
                .value(tape.softmax_rows(det_out.cls_logits))
                .into_dimensionality::<Ix2>()
                .unwrap();
            let mut stage1_scores = Vec::new();
            let refined: Vec<Box4> = proposals
                .iter()
                .enumerate()
                .zip(deltas.rows())
                .filter_map(|((i, p), d)| {
                    let b = clip_to_image(
                        &decode_deltas_weighted(p, &[d[0], d[1], d[2], d[3]]),
                        image_size.0,
                        image_size.1,
                    );
                    if b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0 {
                        stage1_scores.push(cls1[[i, 1]]);
                        Some(b)
                    } else {
                        None
                    }
                })
                .collect();
            if refined.is_empty() {
                results.push(Vec::new());
                continue;
            }
            let rois: Vec<(usize, Box4)> = refined.iter().map(|&b| (img_idx, b)).collect();
            let pooled = self.pool_rois(&tape, &fm, &rois)?;
            let head_out = self.reid_head_forward(&tape, store, Branch::Student, pooled);
            let cls = tape
                .value(tape.softmax_rows(head_out.cls_logits.unwrap()))
                .into_dimensionality::<Ix2>()
                .unwrap();
            let reg = tape
                .value(head_out.deltas.unwrap())
                .into_dimensionality::<Ix2>()
                .unwrap();
            let emb = tape
                .value(head_out.embeddings)
                .into_dimensionality::<Ix2>()
                .unwrap();

            let mut final_boxes = Vec::new();
            let mut scores = Vec::new();
            let mut keep_rows = Vec::new();
            for (i, b) in refined.iter().enumerate() {
                // geometric mean of the two stage scores
                let score = (stage1_scores[i] * cls[[i, 1]]).sqrt();
                if score < self.config.score_threshold {
                    continue;
                }
                let d = [reg[[i, 0]], reg[[i, 1]], reg[[i, 2]], reg[[i, 3]]];
                let fb = clip_to_image(&decode_deltas_weighted(b, &d), image_size.0, image_size.1);
                if fb[2] - fb[0] < 1.0 || fb[3] - fb[1] < 1.0 {
                    continue;
                }
                final_boxes.push(fb);
                scores.push(score);
                keep_rows.push(i);
            }
            let keep = nms(&final_boxes, &scores, self.config.nms_threshold);
            let keep = &keep[..keep.len().min(self.config.max_detections)];
            let dets = keep
                .iter()
                .map(|&k| {
                    let b = final_boxes[k];
                    let row = emb.row(keep_rows[k]).to_owned();
                    let mut bbox =
                        BoundingBox::new(b[0], b[1], b[2] - b[0], b[3] - b[1], -1);
                    bbox.confidence = Some(scores[k]);
                    InferenceDetection { bbox, score: scores[k], embedding: row }
                })
                .collect();
            results.push(dets);
        }
        Ok(results)
    }
}

/// A ground-truth box with its identity, in corner form.
#[derive(Debug, Clone, Copy)]
pub struct GtBox {
    pub bbox: Box4,
    pub identity: i64,
}

impl GtBox {
    pub fn from_annotation(b: &BoundingBox) -> Self {
        GtBox { bbox: [b.x, b.y, b.x2(), b.y2()], identity: b.identity }
    }
}

/// Training targets for a set of boxes produced by matching against ground
/// truth at an IoU threshold.
pub struct BoxTargets {
    /// 1 = person, 0 = background.
    pub cls_labels: Vec<usize>,
    /// Regression deltas onto the matched GT, foreground rows only.
    pub reg_targets: Vec<Option<[f64; 4]>>,
    /// Matched identity (>= 0 labeled, -1 unlabeled person or background).
    pub identities: Vec<i64>,
    pub foreground: Vec<bool>,
}

/// Match boxes to ground truth: IoU >= `fg_iou` adopts the best GT's
/// identity and regression target, anything lower is background.
pub fn match_boxes_to_gt(boxes: &[Box4], gts: &[GtBox], fg_iou: f64) -> BoxTargets {
    let mut cls_labels = Vec::with_capacity(boxes.len());
    let mut reg_targets = Vec::with_capacity(boxes.len());
    let mut identities = Vec::with_capacity(boxes.len());
    let mut foreground = Vec::with_capacity(boxes.len());
    for b in boxes {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou_xyxy(b, &gt.bbox);
            if best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) if v >= fg_iou => {
                cls_labels.push(1);
                reg_targets.push(Some(encode_deltas_weighted(b, &gts[gi].bbox)));
                identities.push(gts[gi].identity);
                foreground.push(true);
            }
            _ => {
                cls_labels.push(0);
                reg_targets.push(None);
                identities.push(-1);
                foreground.push(false);
            }
        }
    }
    BoxTargets { cls_labels, reg_targets, identities, foreground }
}

/// Sampled RoIs for the refinement stage: proposals, the ground-truth boxes,
/// and jittered ground-truth copies (foreground examples at partial overlap,
/// which calibrate the second-stage classifier and regressor), subsampled to
/// `roi_batch_size` with at most `roi_fg_fraction * roi_batch_size`
/// foreground.
pub fn sample_rois<R: Rng>(
    proposals: &[Box4],
    gts: &[GtBox],
    config: &ModelConfig,
    image_size: (f64, f64),
    rng: &mut R,
) -> Vec<Box4> {
    let mut all: Vec<Box4> = proposals.to_vec();
    all.extend(gts.iter().map(|g| g.bbox));
    for g in gts {
        let (w, h) = (g.bbox[2] - g.bbox[0], g.bbox[3] - g.bbox[1]);
        for _ in 0..4 {
            let dx = rng.gen_range(-0.2..0.2) * w;
            let dy = rng.gen_range(-0.2..0.2) * h;
            let sw = rng.gen_range(0.8..1.2);
            let sh = rng.gen_range(0.8..1.2);
            let cx = (g.bbox[0] + g.bbox[2]) / 2.0 + dx;
            let cy = (g.bbox[1] + g.bbox[3]) / 2.0 + dy;
            let b = clip_to_image(
                &[cx - w * sw / 2.0, cy - h * sh / 2.0, cx + w * sw / 2.0, cy + h * sh / 2.0],
                image_size.0,
                image_size.1,
            );
            if b[2] - b[0] >= 2.0 && b[3] - b[1] >= 2.0 {
                all.push(b);
            }
        }
    }
    let targets = match_boxes_to_gt(&all, gts, config.roi_fg_iou);
    let mut fg: Vec<usize> = (0..all.len()).filter(|&i| targets.foreground[i]).collect();
    let mut bg: Vec<usize> = (0..all.len()).filter(|&i| !targets.foreground[i]).collect();
    use rand::seq::SliceRandom;
    fg.shuffle(rng);
    bg.shuffle(rng);
    let max_fg = (config.roi_batch_size as f64 * config.roi_fg_fraction).round() as usize;
    let n_fg = fg.len().min(max_fg.max(1));
    let n_bg = bg.len().min(config.roi_batch_size - n_fg);
    let mut picked: Vec<usize> = fg.into_iter().take(n_fg).collect();
    picked.extend(bg.into_iter().take(n_bg));
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

#[cfg(test)]
mod tests;
