//! The detection refinement head and the (student/teacher) ReID heads.

use rand::Rng;

use crate::autograd::{NodeId, Tape};
use crate::nn::{Conv2d, Linear, ParamStore};

/// Two-layer MLP head refining proposals into boxes and person/background
/// scores.
pub struct DetectionHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
    in_features: usize,
}

pub struct DetectionHeadOutput {
    /// (R, 2) person/background logits.
    pub cls_logits: NodeId,
    /// (R, 4) class-agnostic box deltas.
    pub deltas: NodeId,
}

impl DetectionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        pool: usize,
        hidden: usize,
    ) -> Self {
        let in_features = channels * pool * pool;
        DetectionHead {
            fc1: Linear::new(store, rng, "det_head.fc1", in_features, hidden),
            fc2: Linear::new(store, rng, "det_head.fc2", hidden, hidden),
            cls: Linear::new_scaled(store, rng, "det_head.cls", hidden, 2, 0.01),
            reg: Linear::new_scaled(store, rng, "det_head.reg", hidden, 4, 0.001),
            in_features,
        }
    }

    /// `rois`: (R, C, P, P) pooled features.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, rois: NodeId) -> DetectionHeadOutput {
        let shape = tape.shape(rois);
        let r = shape[0];
        let flat = tape.reshape(rois, &[r, self.in_features]);
        let h = tape.relu(self.fc1.forward(tape, store, flat));
        let h = tape.relu(self.fc2.forward(tape, store, h));
        DetectionHeadOutput {
            cls_logits: self.cls.forward(tape, store, h),
            deltas: self.reg.forward(tape, store, h),
        }
    }
}

/// ReID head: a small conv trunk over the pooled RoI features, global
/// average pooling, and a linear projection onto the unit sphere. The
/// student variant carries extra person/background and box-delta outputs;
/// the teacher is the same architecture without them (it is trained with
/// the OIM loss only).
pub struct ReidHead {
    conv1: Conv2d,
    conv2: Conv2d,
    embed: Linear,
    cls: Option<Linear>,
    reg: Option<Linear>,
}

pub struct ReidHeadOutput {
    /// (R, emb_dim) unit-norm embeddings.
    pub embeddings: NodeId,
    /// (R, 2) logits, student only.
    pub cls_logits: Option<NodeId>,
    /// (R, 4) deltas, student only.
    pub deltas: Option<NodeId>,
}

impl ReidHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        head_channels: usize,
        emb_dim: usize,
        with_detection: bool,
    ) -> Self {
        ReidHead {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_channels, head_channels, 3, 1, 1),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), head_channels, head_channels, 3, 1, 1),
            embed: Linear::new(store, rng, &format!("{name}.embed"), head_channels, emb_dim),
            cls: with_detection
                .then(|| Linear::new_scaled(store, rng, &format!("{name}.cls"), head_channels, 2, 0.01)),
            reg: with_detection
                .then(|| Linear::new_scaled(store, rng, &format!("{name}.reg"), head_channels, 4, 0.001)),
        }
    }

    /// `rois`: (R, C, P, P) pooled features.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, rois: NodeId) -> ReidHeadOutput {
        let h = tape.relu(self.conv1.forward(tape, store, rois));
        let h = tape.relu(self.conv2.forward(tape, store, h));
        let pooled = tape.global_avg_pool(h);
        let raw = self.embed.forward(tape, store, pooled);
        let embeddings = tape.l2_normalize_rows(raw, 1e-12);
        ReidHeadOutput {
            embeddings,
            cls_logits: self.cls.as_ref().map(|l| l.forward(tape, store, pooled)),
            deltas: self.reg.as_ref().map(|l| l.forward(tape, store, pooled)),
        }
    }
}
