use ndarray::{Array3, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;
use crate::nn::ParamStore;

fn tiny_model(seed: u64) -> (SearchModel, ParamStore) {
    let mut store = ParamStore::new();
    let model = SearchModel::new(ModelConfig::tiny(), &mut store, seed);
    (model, store)
}

fn gray_image(h: usize, w: usize, v: f64) -> Array3<f64> {
    Array3::from_elem((3, h, w), v)
}

#[test]
fn tiny_backbone_stride_and_shape() {
    let (model, store) = tiny_model(1);
    assert_eq!(model.stride(), 8);
    let batch = model.normalize_images(&[gray_image(64, 64, 0.3)]).unwrap();
    let tape = Tape::no_grad();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    assert_eq!(tape.shape(fm.node), vec![1, 32, 8, 8]);
}

#[test]
fn residual_backbone_stride_matches_spec() {
    let mut store = ParamStore::new();
    let config = ModelConfig { backbone: BackboneSpec::residual_default(), ..ModelConfig::tiny() };
    let model = SearchModel::new(config, &mut store, 1);
    assert_eq!(model.stride(), 8);
    let batch = model.normalize_images(&[gray_image(64, 64, 0.4)]).unwrap();
    let tape = Tape::no_grad();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    assert_eq!(tape.shape(fm.node), vec![1, 256, 8, 8]);
}

#[test]
fn identical_images_give_identical_features_and_zero_image_is_finite() {
    let (model, store) = tiny_model(2);
    let img = gray_image(64, 64, 0.7);
    let batch = model.normalize_images(&[img.clone(), img]).unwrap();
    let tape = Tape::no_grad();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    let v = tape.value(fm.node).into_dimensionality::<Ix4>().unwrap();
    let a = v.index_axis(ndarray::Axis(0), 0);
    let b = v.index_axis(ndarray::Axis(0), 1);
    assert_eq!(a, b);

    let zeros = model.normalize_images(&[gray_image(64, 64, 0.0)]).unwrap();
    let fm = model.backbone_forward(&tape, &store, &zeros).unwrap();
    tape.with_value(fm.node, |v| assert!(v.iter().all(|x| x.is_finite())));

    let mut bad = gray_image(64, 64, 0.5);
    bad[[0, 0, 0]] = f64::NAN;
    assert!(model.normalize_images(&[bad]).is_err());
}

#[test]
fn rpn_respects_proposal_cap_and_determinism() {
    let mut store = ParamStore::new();
    let config = ModelConfig { rpn_post_nms_top_n: 10, ..ModelConfig::tiny() };
    let model = SearchModel::new(config, &mut store, 3);
    let batch = model.normalize_images(&[gray_image(64, 64, 0.2)]).unwrap();
    let tape = Tape::no_grad();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model
        .propose_regions(&tape, &store, &fm, (64.0, 64.0), None, &mut rng)
        .unwrap();
    assert!(out.proposals[0].len() <= 10, "cap violated: {}", out.proposals[0].len());
    for b in &out.proposals[0] {
        assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 64.0 && b[3] <= 64.0, "unclipped {b:?}");
    }

    let out2 = model
        .propose_regions(&tape, &store, &fm, (64.0, 64.0), None, &mut rng)
        .unwrap();
    assert_eq!(out.proposals, out2.proposals, "eval proposals must be deterministic");
}

#[test]
fn pool_rois_rejects_zero_area() {
    let (model, store) = tiny_model(4);
    let batch = model.normalize_images(&[gray_image(64, 64, 0.2)]).unwrap();
    let tape = Tape::no_grad();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    let err = model.pool_rois(&tape, &fm, &[(0, [10.0, 10.0, 10.0, 30.0])]);
    assert!(err.is_err());
}

#[test]
fn reid_heads_unit_norm_and_independent_initialization() {
    let (model, store) = tiny_model(5);
    let batch = model.normalize_images(&[gray_image(64, 64, 0.6)]).unwrap();
    let tape = Tape::no_grad();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    let rois = vec![
        (0usize, [4.0, 4.0, 20.0, 36.0]),
        (0, [30.0, 10.0, 44.0, 40.0]),
        (0, [8.0, 30.0, 24.0, 60.0]),
    ];
    let pooled = model.pool_rois(&tape, &fm, &rois).unwrap();

    let student = model.reid_head_forward(&tape, &store, Branch::Student, pooled);
    let emb_s = tape.value(student.embeddings).into_dimensionality::<Ix2>().unwrap();
    assert_eq!(emb_s.dim(), (3, 256));
    for row in emb_s.rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-5);
    }
    assert!(student.cls_logits.is_some() && student.deltas.is_some());

    // identical RoI features into the same head give identical embeddings
    let again = model.reid_head_forward(&tape, &store, Branch::Student, pooled);
    assert_eq!(tape.value(again.embeddings), tape.value(student.embeddings));

    // fresh independent teacher parameters: different embeddings
    let teacher = model.reid_head_forward(&tape, &store, Branch::Teacher, pooled);
    let emb_t = tape.value(teacher.embeddings).into_dimensionality::<Ix2>().unwrap();
    assert!(teacher.cls_logits.is_none() && teacher.deltas.is_none());
    for (s, t) in emb_s.rows().into_iter().zip(emb_t.rows()) {
        let cos = s.dot(&t);
        assert!(cos < 0.999, "student and teacher embeddings coincide: cos={cos}");
    }
    assert_eq!(model.teacher_call_count(), 1);
}

#[test]
fn detach_features_is_value_identical() {
    let (model, store) = tiny_model(6);
    let batch = model.normalize_images(&[gray_image(64, 64, 0.6)]).unwrap();
    let tape = Tape::new();
    let fm = model.backbone_forward(&tape, &store, &batch).unwrap();
    let pooled = model.pool_rois(&tape, &fm, &[(0, [4.0, 4.0, 20.0, 36.0])]).unwrap();
    let detached = model.detach_features(&tape, pooled);
    assert_eq!(tape.value(pooled), tape.value(detached));
}

#[test]
fn inference_never_calls_teacher_and_param_sets_match_baseline() {
    let (model, store) = tiny_model(7);
    let out = model.inference(&store, &[gray_image(64, 64, 0.5)]).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(model.teacher_call_count(), 0, "teacher must stay idle in inference");

    // the parameters reachable at inference equal a teacher-less build
    let mut base_store = ParamStore::new();
    let base = SearchModel::new(
        ModelConfig { with_teacher: false, ..ModelConfig::tiny() },
        &mut base_store,
        7,
    );
    assert!(!base.has_teacher());
    let inference_names = SearchModel::inference_param_names(&store);
    let baseline_names: std::collections::BTreeSet<String> =
        base_store.ids().map(|id| base_store.name(id).to_string()).collect();
    assert_eq!(inference_names, baseline_names);

    // shared parameters are bitwise equal for the same seed
    for id in base_store.ids() {
        let name = base_store.name(id).to_string();
        let full_id = store.ids().find(|&i| store.name(i) == name).unwrap();
        assert_eq!(store.value(full_id), base_store.value(id), "param {name} differs");
    }
}

#[test]
fn match_boxes_assigns_identities_per_ledger() {
    let gts = vec![
        GtBox { bbox: [10.0, 10.0, 20.0, 30.0], identity: 4 },
        GtBox { bbox: [40.0, 10.0, 50.0, 30.0], identity: -1 },
    ];
    let boxes = vec![
        [10.0, 10.0, 20.0, 30.0], // exact hit on labeled GT
        [41.0, 11.0, 51.0, 31.0], // overlaps the unlabeled GT
        [60.0, 40.0, 62.0, 44.0], // background
    ];
    let t = match_boxes_to_gt(&boxes, &gts, 0.5);
    assert_eq!(t.identities, vec![4, -1, -1]);
    assert_eq!(t.foreground, vec![true, true, false]);
    assert_eq!(t.cls_labels, vec![1, 1, 0]);
    // exact match yields ~zero regression targets
    let d = t.reg_targets[0].unwrap();
    assert!(d.iter().all(|v| v.abs() < 1e-9));
}
