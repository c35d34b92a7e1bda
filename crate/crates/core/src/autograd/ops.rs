//! Primitive differentiable operations.
//!
//! Each op computes its output eagerly and registers a backward closure that
//! maps the output gradient to parent gradients. Shapes are validated with
//! asserts: shape errors here are programming errors, not user input errors.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

use super::{NodeId, Tape};

/// Region of interest in image coordinates (x1,y1,x2,y2) plus batch index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn as4(v: &ArrayD<f64>) -> Array4<f64> {
    v.view().into_dimensionality::<Ix4>().unwrap().to_owned()
}

impl Tape {
    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &va + &vb;
        self.op(
            out,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &va - &vb;
        self.op(
            out,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(-ctx.grad.clone())]),
        )
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &va * &vb;
        self.op(
            out,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad * ctx.inputs[1]),
                    ctx.needs[1].then(|| ctx.grad * ctx.inputs[0]),
                ]
            }),
        )
    }

    pub fn scale(&self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad * c)]),
        )
    }

    pub fn add_scalar(&self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) + c;
        self.op(out, vec![a], Box::new(|ctx| vec![Some(ctx.grad.clone())]))
    }

    /// `a (m,k) . b (k,n) -> (m,n)`
    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (as2(&self.value(a)), as2(&self.value(b)));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let out = va.dot(&vb).into_dyn();
        self.op(
            out,
            vec![a, b],
            Box::new(|ctx| {
                let g = as2(ctx.grad);
                let (a, b) = (as2(ctx.inputs[0]), as2(ctx.inputs[1]));
                vec![
                    ctx.needs[0].then(|| g.dot(&b.t()).into_dyn()),
                    ctx.needs[1].then(|| a.t().dot(&g).into_dyn()),
                ]
            }),
        )
    }

    /// `a (m,k) . b (n,k)^T -> (m,n)`
    pub fn matmul_nt(&self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (as2(&self.value(a)), as2(&self.value(b)));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt: inner dim mismatch");
        let out = va.dot(&vb.t()).into_dyn();
        self.op(
            out,
            vec![a, b],
            Box::new(|ctx| {
                let g = as2(ctx.grad);
                let (a, b) = (as2(ctx.inputs[0]), as2(ctx.inputs[1]));
                vec![
                    ctx.needs[0].then(|| g.dot(&b).into_dyn()),
                    ctx.needs[1].then(|| g.t().dot(&a).into_dyn()),
                ]
            }),
        )
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.inputs[0], |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Elementwise `ln(max(x, eps))`; the gradient is zeroed where the floor
    /// was active.
    pub fn ln_eps(&self, a: NodeId, eps: f64) -> NodeId {
        let out = self.value(a).mapv(|v| v.max(eps).ln());
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.inputs[0], |gv, &xv| {
                    *gv = if xv > eps { *gv / xv } else { 0.0 };
                });
                vec![Some(g)]
            }),
        )
    }

    /// Row-wise softmax of a 2-d array, max-shifted for stability.
    pub fn softmax_rows(&self, a: NodeId) -> NodeId {
        let x = as2(&self.value(a));
        let out = softmax2(&x).into_dyn();
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                let g = as2(ctx.grad);
                let y = as2(ctx.output);
                // dx = y * (g - sum(g*y) per row)
                let dot = (&g * &y).sum_axis(Axis(1));
                let mut dx = g;
                for (mut row, (&d, yrow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(dot.iter().zip(y.rows()))
                {
                    row.zip_mut_with(&yrow, |gv, &yv| *gv = (*gv - d) * yv);
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let out = super::scalar_array(self.value(a).sum());
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                let g = ctx.grad.iter().copied().next().unwrap();
                vec![Some(ArrayD::from_elem(ctx.inputs[0].raw_dim(), g))]
            }),
        )
    }

    pub fn mean_all(&self, a: NodeId) -> NodeId {
        let n = self.with_value(a, |v| v.len()).max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape: size");
        let out = v.into_shape_with_order(IxDyn(shape)).unwrap();
        self.op(
            out,
            vec![a],
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .clone()
                    .into_shape_with_order(ctx.inputs[0].raw_dim())
                    .unwrap();
                vec![Some(g)]
            }),
        )
    }

    /// Select rows of a 2-d array; backward scatter-adds.
    pub fn select_rows(&self, a: NodeId, indices: &[usize]) -> NodeId {
        let x = as2(&self.value(a));
        let idx = indices.to_vec();
        let mut out = Array2::zeros((idx.len(), x.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&x.row(i));
        }
        self.op(
            out.into_dyn(),
            vec![a],
            Box::new(move |ctx| {
                let g = as2(ctx.grad);
                let x = as2(ctx.inputs[0]);
                let mut dx = Array2::zeros(x.raw_dim());
                for (o, &i) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g.row(o);
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// L2-normalize each row: `y = x / max(||x||, eps)`.
    pub fn l2_normalize_rows(&self, a: NodeId, eps: f64) -> NodeId {
        let x = as2(&self.value(a));
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|v| v / n);
        }
        self.op(
            out.into_dyn(),
            vec![a],
            Box::new(move |ctx| {
                let g = as2(ctx.grad);
                let x = as2(ctx.inputs[0]);
                let y = as2(ctx.output);
                let mut dx = Array2::zeros(x.raw_dim());
                for ((grow, xrow), (yrow, mut drow)) in g
                    .rows()
                    .into_iter()
                    .zip(x.rows())
                    .zip(y.rows().into_iter().zip(dx.rows_mut()))
                {
                    let n = xrow.dot(&xrow).sqrt().max(eps);
                    let dot = grow.dot(&yrow);
                    for (d, (&gv, &yv)) in
                        drow.iter_mut().zip(grow.iter().zip(yrow.iter()))
                    {
                        *d = (gv - yv * dot) / n;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Normalize each row to sum 1 (rows must have positive sums).
    pub fn normalize_rows_sum(&self, a: NodeId) -> NodeId {
        let x = as2(&self.value(a));
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let s = row.sum();
            assert!(s > 0.0, "normalize_rows_sum: nonpositive row sum {s}");
            row.mapv_inplace(|v| v / s);
        }
        self.op(
            out.into_dyn(),
            vec![a],
            Box::new(|ctx| {
                let g = as2(ctx.grad);
                let x = as2(ctx.inputs[0]);
                let y = as2(ctx.output);
                let mut dx = Array2::zeros(x.raw_dim());
                for ((grow, xrow), (yrow, mut drow)) in g
                    .rows()
                    .into_iter()
                    .zip(x.rows())
                    .zip(y.rows().into_iter().zip(dx.rows_mut()))
                {
                    let s = xrow.sum();
                    let dot = grow.dot(&yrow);
                    for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                        *d = (gv - dot) / s;
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy_rows(&self, logits: NodeId, labels: &[usize]) -> NodeId {
        let x = as2(&self.value(logits));
        assert_eq!(x.nrows(), labels.len(), "cross_entropy_rows: label count");
        assert!(!labels.is_empty(), "cross_entropy_rows: empty batch");
        let labels = labels.to_vec();
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (row, &lab) in x.rows().into_iter().zip(labels.iter()) {
            assert!(lab < row.len(), "cross_entropy_rows: label out of range");
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[lab];
        }
        let out = super::scalar_array(loss / n);
        self.op(
            out,
            vec![logits],
            Box::new(move |ctx| {
                let g = ctx.grad.iter().copied().next().unwrap();
                let x = as2(ctx.inputs[0]);
                let mut dx = softmax2(&x);
                for (mut row, &lab) in dx.rows_mut().into_iter().zip(labels.iter()) {
                    row[lab] -= 1.0;
                    row.mapv_inplace(|v| v * g / n);
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits_mean(&self, logits: NodeId, targets: &Array1<f64>) -> NodeId {
        let x = self
            .value(logits)
            .into_dimensionality::<Ix1>()
            .unwrap();
        assert_eq!(x.len(), targets.len(), "bce: target count");
        assert!(!x.is_empty(), "bce: empty batch");
        let t = targets.clone();
        let n = x.len() as f64;
        let loss: f64 = x
            .iter()
            .zip(t.iter())
            .map(|(&v, &tv)| v.max(0.0) - v * tv + (1.0 + (-v.abs()).exp()).ln())
            .sum::<f64>()
            / n;
        let out = super::scalar_array(loss);
        self.op(
            out,
            vec![logits],
            Box::new(move |ctx| {
                let g = ctx.grad.iter().copied().next().unwrap();
                let x = ctx.inputs[0].view().into_dimensionality::<Ix1>().unwrap();
                let dx: Array1<f64> = x
                    .iter()
                    .zip(t.iter())
                    .map(|(&v, &tv)| (sigmoid(v) - tv) * g / n)
                    .collect();
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Smooth-L1 (Huber) summed over all elements against constant targets.
    pub fn smooth_l1_sum(&self, pred: NodeId, target: &ArrayD<f64>, beta: f64) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "smooth_l1: shape mismatch");
        assert!(beta > 0.0);
        let t = target.clone();
        let loss: f64 = p
            .iter()
            .zip(t.iter())
            .map(|(&pv, &tv)| {
                let d = (pv - tv).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let out = super::scalar_array(loss);
        self.op(
            out,
            vec![pred],
            Box::new(move |ctx| {
                let g = ctx.grad.iter().copied().next().unwrap();
                let mut dx = ctx.inputs[0].clone();
                dx.zip_mut_with(&t, |pv, &tv| {
                    let d = *pv - tv;
                    *pv = g * if d.abs() < beta { d / beta } else { d.signum() };
                });
                vec![Some(dx)]
            }),
        )
    }

    /// 2-d convolution, NCHW layout, via im2col.
    pub fn conv2d(&self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.value(x));
        let wv = as4(&self.value(w));
        let (n, cin, h, wdt) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d: channel mismatch");
        assert!(stride >= 1);
        let hout = (h + 2 * pad).checked_sub(kh).expect("conv2d: kernel larger than input") / stride + 1;
        let wout = (wdt + 2 * pad).checked_sub(kw).expect("conv2d: kernel larger than input") / stride + 1;

        let w_mat = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = Array4::zeros((n, cout, hout, wout));
        for b in 0..n {
            let cols = im2col(&xv.index_axis(Axis(0), b).to_owned(), kh, kw, stride, pad);
            let y = w_mat.dot(&cols); // (cout, hout*wout)
            out.index_axis_mut(Axis(0), b).assign(
                &y.into_shape_with_order((cout, hout, wout)).unwrap(),
            );
        }
        self.op(
            out.into_dyn(),
            vec![x, w],
            Box::new(move |ctx| {
                let g = as4(ctx.grad);
                let xv = as4(ctx.inputs[0]);
                let wv = as4(ctx.inputs[1]);
                let (n, cin, h, wdt) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let (_, _, hout, wout) = g.dim();
                let k = cin * kh * kw;
                let w_mat = wv
                    .view()
                    .into_shape_with_order((cout, k))
                    .unwrap()
                    .to_owned();
                let mut dw_mat = Array2::<f64>::zeros((cout, k));
                let mut dx = Array4::<f64>::zeros((n, cin, h, wdt));
                for b in 0..n {
                    let g_b = g
                        .index_axis(Axis(0), b)
                        .to_owned()
                        .into_shape_with_order((cout, hout * wout))
                        .unwrap();
                    if ctx.needs[1] {
                        let cols =
                            im2col(&xv.index_axis(Axis(0), b).to_owned(), kh, kw, stride, pad);
                        dw_mat += &g_b.dot(&cols.t());
                    }
                    if ctx.needs[0] {
                        let dcols = w_mat.t().dot(&g_b); // (k, L)
                        col2im(
                            &dcols,
                            &mut dx.index_axis_mut(Axis(0), b),
                            kh,
                            kw,
                            stride,
                            pad,
                            hout,
                            wout,
                        );
                    }
                }
                vec![
                    ctx.needs[0].then(|| dx.into_dyn()),
                    ctx.needs[1].then(|| {
                        dw_mat
                            .into_shape_with_order((cout, cin, kh, kw))
                            .unwrap()
                            .into_dyn()
                    }),
                ]
            }),
        )
    }

    /// Add a per-channel bias to an NCHW tensor.
    pub fn bias_nchw(&self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as4(&self.value(x));
        let bv = self.value(b).into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.dim().1, bv.len(), "bias_nchw: channel mismatch");
        let mut out = xv;
        for (c, &bias) in bv.iter().enumerate() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bias);
        }
        self.op(
            out.into_dyn(),
            vec![x, b],
            Box::new(|ctx| {
                let g = as4(ctx.grad);
                let c = g.dim().1;
                let db: Array1<f64> = (0..c)
                    .map(|ci| g.index_axis(Axis(1), ci).sum())
                    .collect();
                vec![Some(ctx.grad.clone()), Some(db.into_dyn())]
            }),
        )
    }

    /// Add a bias vector to every row of a 2-d tensor.
    pub fn bias_rows(&self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.value(x));
        let bv = self.value(b).into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.ncols(), bv.len(), "bias_rows: width mismatch");
        let out = &xv + &bv;
        self.op(
            out.into_dyn(),
            vec![x, b],
            Box::new(|ctx| {
                let g = as2(ctx.grad);
                let db = g.sum_axis(Axis(0));
                vec![Some(ctx.grad.clone()), Some(db.into_dyn())]
            }),
        )
    }

    /// Global average pooling: (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&self, x: NodeId) -> NodeId {
        let xv = as4(&self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut out = Array2::zeros((n, c));
        for b in 0..n {
            for ci in 0..c {
                out[[b, ci]] = xv
                    .index_axis(Axis(0), b)
                    .index_axis(Axis(0), ci)
                    .mean()
                    .unwrap();
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let g = as2(ctx.grad);
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Array4::zeros((n, c, h, w));
                for b in 0..n {
                    for ci in 0..c {
                        dx.index_axis_mut(Axis(0), b)
                            .index_axis_mut(Axis(0), ci)
                            .fill(g[[b, ci]] * scale);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Gather individual elements of a 4-d tensor into a 1-d vector;
    /// backward scatter-adds. Used to pull sampled anchor predictions out of
    /// RPN output maps.
    pub fn gather_nchw(&self, x: NodeId, coords: &[[usize; 4]]) -> NodeId {
        let xv = as4(&self.value(x));
        let coords = coords.to_vec();
        let out: Array1<f64> = coords.iter().map(|&[a, b, c, d]| xv[[a, b, c, d]]).collect();
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = Array4::zeros(as4(ctx.inputs[0]).raw_dim());
                for (&[a, b, c, d], &gv) in coords.iter().zip(g.iter()) {
                    dx[[a, b, c, d]] += gv;
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// RoI-Align with one bilinear sample per output bin (aligned variant:
    /// half-pixel offset, no coordinate quantization). `spatial_scale` maps
    /// image coordinates onto the feature grid (1/stride).
    pub fn roi_align(
        &self,
        x: NodeId,
        rois: &[Roi],
        pool: usize,
        spatial_scale: f64,
    ) -> NodeId {
        let xv = as4(&self.value(x));
        let (n, c, h, w) = xv.dim();
        assert!(pool >= 1);
        for r in rois {
            assert!(r.batch < n, "roi_align: batch index out of range");
        }
        let rois_owned = rois.to_vec();
        let mut out = Array4::zeros((rois.len(), c, pool, pool));
        for (ri, roi) in rois_owned.iter().enumerate() {
            let samples = roi_samples(roi, pool, spatial_scale);
            for (pidx, &(sy, sx)) in samples.iter().enumerate() {
                let (py, px) = (pidx / pool, pidx % pool);
                if let Some(corners) = bilinear_corners(sy, sx, h, w) {
                    for ci in 0..c {
                        let mut v = 0.0;
                        for &(yy, xx, wt) in &corners {
                            v += wt * xv[[roi.batch, ci, yy, xx]];
                        }
                        out[[ri, ci, py, px]] = v;
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |ctx| {
                let g = as4(ctx.grad);
                let xv = as4(ctx.inputs[0]);
                let (n, c, h, w) = xv.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                for (ri, roi) in rois_owned.iter().enumerate() {
                    let samples = roi_samples(roi, pool, spatial_scale);
                    for (pidx, &(sy, sx)) in samples.iter().enumerate() {
                        let (py, px) = (pidx / pool, pidx % pool);
                        if let Some(corners) = bilinear_corners(sy, sx, h, w) {
                            for ci in 0..c {
                                let gv = g[[ri, ci, py, px]];
                                for &(yy, xx, wt) in &corners {
                                    dx[[roi.batch, ci, yy, xx]] += wt * gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax2(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Unfold one image (C,H,W) into columns (C*kh*kw, Hout*Wout).
fn im2col(x: &Array3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let hout = (h + 2 * pad - kh) / stride + 1;
    let wout = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::zeros((c * kh * kw, hout * wout));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..hout {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wout {
                        let ix = ox * stride + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        cols[[row, oy * wout + ox]] = x[[ci, iy, ix - pad]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter columns back onto the (C,H,W) gradient (inverse of `im2col`).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) {
    let (c, h, w) = dx.dim();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..hout {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wout {
                        let ix = ox * stride + kx;
                        if ix < pad || ix >= w + pad {
                            continue;
                        }
                        dx[[ci, iy, ix - pad]] += cols[[row, oy * wout + ox]];
                    }
                }
            }
        }
    }
}

/// Bin-center sample coordinates on the feature grid for one roi,
/// row-major over the pool grid.
fn roi_samples(roi: &Roi, pool: usize, scale: f64) -> Vec<(f64, f64)> {
    let sy = roi.y1 * scale - 0.5;
    let sx = roi.x1 * scale - 0.5;
    let bin_h = (roi.y2 - roi.y1) * scale / pool as f64;
    let bin_w = (roi.x2 - roi.x1) * scale / pool as f64;
    let mut out = Vec::with_capacity(pool * pool);
    for py in 0..pool {
        for px in 0..pool {
            out.push((
                sy + (py as f64 + 0.5) * bin_h,
                sx + (px as f64 + 0.5) * bin_w,
            ));
        }
    }
    out
}

/// Corner indices and weights for bilinear interpolation at (y,x); None when
/// the sample falls entirely outside the feature map.
fn bilinear_corners(y: f64, x: f64, h: usize, w: usize) -> Option<[(usize, usize, f64); 4]> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let mut y_lo = y.floor() as usize;
    let mut x_lo = x.floor() as usize;
    let (y_hi, ly) = if y_lo >= h - 1 {
        y_lo = h - 1;
        (h - 1, 0.0)
    } else {
        (y_lo + 1, y - y_lo as f64)
    };
    let (x_hi, lx) = if x_lo >= w - 1 {
        x_lo = w - 1;
        (w - 1, 0.0)
    } else {
        (x_lo + 1, x - x_lo as f64)
    };
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some([
        (y_lo, x_lo, hy * hx),
        (y_lo, x_hi, hy * lx),
        (y_hi, x_lo, ly * hx),
        (y_hi, x_hi, ly * lx),
    ])
}
