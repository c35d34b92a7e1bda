use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_grad, max_rel_err};
use super::ops::Roi;
use super::Tape;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Check d(f)/dx against finite differences for a scalar-producing graph.
fn check_op(shape: &[usize], seed: u64, f: impl Fn(&Tape, super::NodeId) -> super::NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_arr(&mut rng, shape);

    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = f(&tape, x);
    let grads = tape.backward(loss);
    let analytic = grads.wrt(x).expect("no gradient reached input").clone();

    let mut eval = |xv: &ArrayD<f64>| {
        let t = Tape::new();
        let x = t.leaf(xv.clone());
        t.scalar(f(&t, x))
    };
    let numeric = finite_diff_grad(&mut eval, &x0, H);
    let err = max_rel_err(&analytic, &numeric, 1e-4);
    assert!(err < TOL, "gradient mismatch: rel err {err}");
}

#[test]
fn grad_elementwise_ops() {
    check_op(&[3, 4], 1, |t, x| {
        let y = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(99), &[3, 4]));
        let s = t.add(x, y);
        let m = t.mul(s, x);
        let d = t.sub(m, y);
        t.sum_all(d)
    });
    check_op(&[5], 2, |t, x| {
        let y = t.scale(x, 2.5);
        let z = t.add_scalar(y, -0.3);
        t.mean_all(z)
    });
}

#[test]
fn grad_relu_ln() {
    check_op(&[4, 3], 3, |t, x| {
        let y = t.relu(x);
        t.sum_all(y)
    });
    // keep inputs away from the relu kink and the ln floor
    check_op(&[6], 4, |t, x| {
        let y = t.add_scalar(x, 3.0);
        let l = t.ln_eps(y, 1e-12);
        t.sum_all(l)
    });
}

#[test]
fn grad_matmul() {
    check_op(&[3, 4], 5, |t, x| {
        let w = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(50), &[4, 2]));
        let y = t.matmul(x, w);
        t.sum_all(y)
    });
    check_op(&[3, 4], 6, |t, x| {
        let w = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(51), &[5, 4]));
        let y = t.matmul_nt(x, w);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
    // self product: M = X X^T accumulates two gradient paths into x
    check_op(&[4, 3], 7, |t, x| {
        let m = t.matmul_nt(x, x);
        let sq = t.mul(m, m);
        t.sum_all(sq)
    });
}

#[test]
fn grad_softmax_and_normalizers() {
    check_op(&[3, 5], 8, |t, x| {
        let s = t.softmax_rows(x);
        let l = t.ln_eps(s, 1e-12);
        let p = t.mul(s, l);
        t.sum_all(p)
    });
    check_op(&[4, 6], 9, |t, x| {
        let y = t.l2_normalize_rows(x, 1e-12);
        let c = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(52), &[4, 6]));
        let p = t.mul(y, c);
        t.sum_all(p)
    });
    // positive rows for sum-normalization
    check_op(&[3, 4], 10, |t, x| {
        let e = t.mul(x, x);
        let shifted = t.add_scalar(e, 0.5);
        let y = t.normalize_rows_sum(shifted);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
}

#[test]
fn grad_losses() {
    check_op(&[4, 3], 11, |t, x| t.cross_entropy_rows(x, &[0, 2, 1, 1]));
    check_op(&[6], 12, |t, x| {
        let targets = Array1::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        t.bce_with_logits_mean(x, &targets)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let target = rand_arr(&mut rng, &[5, 4]);
    let t2 = target.clone();
    check_op(&[5, 4], 13, move |t, x| t.smooth_l1_sum(x, &t2, 1.0));
    // small beta exercises both branches
    let t3 = target;
    check_op(&[5, 4], 14, move |t, x| t.smooth_l1_sum(x, &t3, 0.2));
}

#[test]
fn grad_select_reshape() {
    check_op(&[5, 3], 15, |t, x| {
        let s = t.select_rows(x, &[0, 2, 2, 4]);
        let sq = t.mul(s, s);
        t.sum_all(sq)
    });
    check_op(&[2, 3, 2, 2], 16, |t, x| {
        let r = t.reshape(x, &[2, 12]);
        let sq = t.mul(r, r);
        t.sum_all(sq)
    });
}

#[test]
fn grad_conv2d() {
    // wrt input
    check_op(&[2, 3, 5, 5], 17, |t, x| {
        let w = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(53), &[4, 3, 3, 3]));
        let y = t.conv2d(x, w, 1, 1);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
    // wrt weight, strided
    check_op(&[4, 2, 3, 3], 18, |t, wv| {
        let x = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(54), &[1, 2, 6, 6]));
        let y = t.conv2d(x, wv, 2, 1);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
}

#[test]
fn grad_pool_bias() {
    check_op(&[2, 3, 4, 4], 19, |t, x| {
        let p = t.global_avg_pool(x);
        let sq = t.mul(p, p);
        t.sum_all(sq)
    });
    check_op(&[3], 20, |t, b| {
        let x = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(55), &[2, 3, 3, 3]));
        let y = t.bias_nchw(x, b);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
    check_op(&[4], 21, |t, b| {
        let x = t.leaf(rand_arr(&mut ChaCha8Rng::seed_from_u64(56), &[3, 4]));
        let y = t.bias_rows(x, b);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
}

#[test]
fn grad_roi_align() {
    let rois = vec![
        Roi { batch: 0, x1: 2.0, y1: 2.0, x2: 14.0, y2: 12.0 },
        Roi { batch: 1, x1: 0.5, y1: 1.0, x2: 9.5, y2: 15.0 },
    ];
    let r2 = rois.clone();
    check_op(&[2, 3, 8, 8], 22, move |t, x| {
        let y = t.roi_align(x, &r2, 3, 0.5);
        let sq = t.mul(y, y);
        t.sum_all(sq)
    });
    let _ = rois;
}

#[test]
fn roi_align_identity_and_constant() {
    // constant feature map pools to the constant
    let tape = Tape::no_grad();
    let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 6, 6]), 3.25));
    let rois = vec![Roi { batch: 0, x1: 3.0, y1: 2.0, x2: 11.0, y2: 9.0 }];
    let y = tape.roi_align(x, &rois, 4, 0.5);
    tape.with_value(y, |v| {
        for &val in v.iter() {
            assert!((val - 3.25).abs() < 1e-12);
        }
    });

    // box covering the whole map with pool == map size reproduces the map
    let map = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
    let tape = Tape::no_grad();
    let x = tape.constant(map.clone().into_dyn());
    let rois = vec![Roi { batch: 0, x1: 0.0, y1: 0.0, x2: 8.0, y2: 8.0 }];
    let y = tape.roi_align(x, &rois, 4, 0.5);
    tape.with_value(y, |v| {
        for i in 0..4 {
            for j in 0..4 {
                assert!((v[[0, 0, i, j]] - map[[0, 0, i, j]]).abs() < 1e-12);
            }
        }
    });
}

#[test]
fn roi_align_matches_dense_sampling_on_linear_ramp() {
    // On a linear ramp, the bin-center sample equals the dense bin average.
    let h = 10;
    let w = 10;
    let map = Array4::from_shape_fn((1, 1, h, w), |(_, _, i, j)| {
        0.7 * i as f64 + 0.3 * j as f64 + 1.0
    });
    let tape = Tape::no_grad();
    let x = tape.constant(map.clone().into_dyn());
    let roi = Roi { batch: 0, x1: 3.0, y1: 4.0, x2: 15.0, y2: 17.0 };
    let pool = 3;
    let scale = 0.5;
    let y = tape.roi_align(x, &[roi], pool, scale);

    // dense oracle: average many bilinear samples per bin
    let dense = |py: usize, px: usize| {
        let sy = roi.y1 * scale - 0.5;
        let sx = roi.x1 * scale - 0.5;
        let bh = (roi.y2 - roi.y1) * scale / pool as f64;
        let bw = (roi.x2 - roi.x1) * scale / pool as f64;
        let k = 40;
        let mut acc = 0.0;
        for iy in 0..k {
            for ix in 0..k {
                let yy = sy + py as f64 * bh + (iy as f64 + 0.5) * bh / k as f64;
                let xx = sx + px as f64 * bw + (ix as f64 + 0.5) * bw / k as f64;
                let yl = (yy.floor() as usize).min(h - 1);
                let xl = (xx.floor() as usize).min(w - 1);
                let yh = (yl + 1).min(h - 1);
                let xh = (xl + 1).min(w - 1);
                let fy = yy - yl as f64;
                let fx = xx - xl as f64;
                acc += map[[0, 0, yl, xl]] * (1.0 - fy) * (1.0 - fx)
                    + map[[0, 0, yl, xh]] * (1.0 - fy) * fx
                    + map[[0, 0, yh, xl]] * fy * (1.0 - fx)
                    + map[[0, 0, yh, xh]] * fy * fx;
            }
        }
        acc / (k * k) as f64
    };

    tape.with_value(y, |v| {
        for py in 0..pool {
            for px in 0..pool {
                let want = dense(py, px);
                let got = v[[0, 0, py, px]];
                assert!(
                    (got - want).abs() < 1e-9,
                    "bin ({py},{px}): got {got}, dense {want}"
                );
            }
        }
    });
}

#[test]
fn detach_blocks_gradients_but_keeps_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x0 = rand_arr(&mut rng, &[3, 3]);
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let d = tape.detach(x);
    // bitwise equal values
    tape.with_value(d, |v| assert_eq!(v, &x0));
    let sq = tape.mul(d, d);
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss);
    assert!(grads.wrt(x).is_none(), "gradient leaked through detach");
}

#[test]
fn no_grad_tape_skips_backward_bookkeeping() {
    let tape = Tape::no_grad();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
    let y = tape.mul(x, x);
    let l = tape.sum_all(y);
    assert!((tape.scalar(l) - 9.0).abs() < 1e-12);
}

#[test]
fn softmax_rows_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-2.0..2.0));
    let mut shifted = x.clone();
    for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v + (i as f64 - 1.5) * 3.0);
    }
    let t = Tape::no_grad();
    let a = t.softmax_rows(t.constant(x.into_dyn()));
    let b = t.softmax_rows(t.constant(shifted.into_dyn()));
    let (va, vb) = (t.value(a), t.value(b));
    for (x, y) in va.iter().zip(vb.iter()) {
        assert!((x - y).abs() < 1e-7);
    }
}
