//! Plain box arithmetic shared by the RPN, the detection head, and
//! inference post-processing. Boxes here are `[x1, y1, x2, y2]` corners.

pub type Box4 = [f64; 4];

pub fn area(b: &Box4) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou_xyxy(a: &Box4, b: &Box4) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression targets (tx, ty, tw, th) mapping `anchor` onto `gt`.
pub fn encode_deltas(anchor: &Box4, gt: &Box4) -> [f64; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (acx, acy) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let (gw, gh) = (gt[2] - gt[0], gt[3] - gt[1]);
    let (gcx, gcy) = (gt[0] + 0.5 * gw, gt[1] + 0.5 * gh);
    [
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; `tw`/`th` are clamped to keep exp finite.
pub fn decode_deltas(anchor: &Box4, deltas: &[f64; 4]) -> Box4 {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (acx, acy) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let clamp = 4.0; // exp(4) ~ 55x growth cap
    let cx = acx + deltas[0].clamp(-clamp, clamp) * aw;
    let cy = acy + deltas[1].clamp(-clamp, clamp) * ah;
    let w = aw * deltas[2].clamp(-clamp, clamp).exp();
    let h = ah * deltas[3].clamp(-clamp, clamp).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Regression-target scaling for the refinement heads (RPN targets stay
/// unscaled). Keeps smooth-L1 gradients in a useful range for small offsets.
pub const HEAD_REG_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// [`encode_deltas`] scaled by [`HEAD_REG_WEIGHTS`].
pub fn encode_deltas_weighted(anchor: &Box4, gt: &Box4) -> [f64; 4] {
    let mut d = encode_deltas(anchor, gt);
    for (v, w) in d.iter_mut().zip(HEAD_REG_WEIGHTS) {
        *v *= w;
    }
    d
}

/// Inverse of [`encode_deltas_weighted`].
pub fn decode_deltas_weighted(anchor: &Box4, deltas: &[f64; 4]) -> Box4 {
    let mut d = *deltas;
    for (v, w) in d.iter_mut().zip(HEAD_REG_WEIGHTS) {
        *v /= w;
    }
    decode_deltas(anchor, &d)
}

pub fn clip_to_image(b: &Box4, width: f64, height: f64) -> Box4 {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Greedy NMS over (box, score) pairs sorted descending by score (ties by
/// index); returns surviving indices in rank order.
pub fn nms(boxes: &[Box4], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !suppressed[j] && j != i && iou_xyxy(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let anchor = [10.0, 20.0, 30.0, 60.0];
        let gt = [12.0, 25.0, 35.0, 70.0];
        let deltas = encode_deltas(&anchor, &gt);
        let back = decode_deltas(&anchor, &deltas);
        for (a, b) in gt.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // identity boxes give zero deltas
        let zero = encode_deltas(&anchor, &anchor);
        for d in zero {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_encode_decode_round_trip() {
        let anchor = [10.0, 20.0, 30.0, 60.0];
        let gt = [12.0, 25.0, 35.0, 70.0];
        let back = decode_deltas_weighted(&anchor, &encode_deltas_weighted(&anchor, &gt));
        for (a, b) in gt.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = vec![
            [0.0, 0.0, 10.0, 10.0],
            [1.0, 1.0, 11.0, 11.0],
            [50.0, 50.0, 60.0, 60.0],
        ];
        let keep = nms(&boxes, &[0.9, 0.8, 0.7], 0.5);
        assert_eq!(keep, vec![0, 2]);
    }
}
