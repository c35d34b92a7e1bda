//! Detection and person-search metrics: IoU matching at 0.5, detection
//! Recall/AP, search mAP and CMC top-k over the query/gallery protocol, and
//! altitude-stratified reporting.
//!
//! Average precision uses all-point (envelope) interpolation for both the
//! detection PR curve and the per-query ranked lists; ranking similarity is
//! the cosine (dot product of unit-norm embeddings). Ranking ties are broken
//! by image id and box geometry so every metric is invariant to the input
//! order of detections.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::{AltitudeBucket, AnnotationSet, BoundingBox, ProtocolEntry, SearchProtocol};
use crate::error::{CoreError, Result};

/// One detected person: box, confidence, and its ReID embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    /// Person confidence in [0,1].
    pub score: f64,
    /// Unit-norm embedding.
    pub embedding: Array1<f64>,
}

/// Intersection-over-union of two boxes. Zero-area boxes are rejected.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "iou of zero-area box ({}x{} vs {}x{})",
            a.w, a.h, b.w, b.h
        )));
    }
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Detection matching threshold used throughout.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Greedy one-to-one assignment: detections in descending-score order claim
/// the highest-IoU unclaimed ground-truth box above the threshold. Returns
/// `(detection index, gt index)` pairs.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BoundingBox],
    threshold: f64,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| det_rank_key(&dets[a]).partial_cmp(&det_rank_key(&dets[b])).unwrap());
    let mut claimed = vec![false; gts.len()];
    let mut matches = Vec::new();
    for di in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let v = match iou(&dets[di].bbox, gt) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if v > threshold && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            claimed[gi] = true;
            matches.push((di, gi));
        }
    }
    matches
}

/// Deterministic, content-based sort key: score descending, then image id
/// and box geometry ascending, so shuffled inputs rank identically.
fn det_rank_key(d: &Detection) -> (std::cmp::Reverse<Ordered>, String, [Ordered; 4]) {
    (
        std::cmp::Reverse(Ordered(d.score)),
        d.image_id.clone(),
        [Ordered(d.bbox.x), Ordered(d.bbox.y), Ordered(d.bbox.w), Ordered(d.bbox.h)],
    )
}

/// Total-ordered f64 wrapper for sort keys (inputs are finite by contract).
#[derive(PartialEq)]
struct Ordered(f64);

impl Eq for Ordered {}
impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.partial_cmp(&other.0).expect("non-finite sort key")
    }
}
impl PartialOrd for Ordered {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Area under the precision envelope of a ranked TP/FP list with
/// `total_relevant` ground-truth positives (all-point interpolation).
fn envelope_ap(labels: &[bool], total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let n = labels.len();
    let mut precision = vec![0.0; n];
    let mut tp = 0usize;
    for (k, &is_tp) in labels.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision[k] = tp as f64 / (k + 1) as f64;
    }
    // suffix max turns the raw curve into its envelope
    for k in (0..n.saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(k, _)| precision[k])
        .sum::<f64>()
        / total_relevant as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub recall: f64,
    pub ap: f64,
    pub total_gt: usize,
    pub matched_gt: usize,
}

/// Corpus-level detection Recall and AP at IoU 0.5. Returns `None` (flagged
/// undefined) when there are no ground-truth boxes at all.
pub fn detection_recall_ap(
    images: &[(Vec<Detection>, Vec<BoundingBox>)],
    threshold: f64,
) -> Option<DetectionMetrics> {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return None;
    }
    // per-image greedy matching, then a global score-ranked PR curve
    let mut ranked: Vec<(&Detection, bool)> = Vec::new();
    let mut matched_gt = 0usize;
    for (dets, gts) in images {
        let matches = match_detections(dets, gts, threshold);
        matched_gt += matches.len();
        let mut is_tp = vec![false; dets.len()];
        for (di, _) in matches {
            is_tp[di] = true;
        }
        ranked.extend(dets.iter().zip(is_tp));
    }
    ranked.sort_by(|a, b| det_rank_key(a.0).partial_cmp(&det_rank_key(b.0)).unwrap());
    let labels: Vec<bool> = ranked.iter().map(|(_, l)| *l).collect();
    Some(DetectionMetrics {
        recall: matched_gt as f64 / total_gt as f64,
        ap: envelope_ap(&labels, total_gt),
        total_gt,
        matched_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub num_queries: usize,
    /// Queries with no true match among the gallery detections; they score
    /// AP 0 and count as top-k misses.
    pub zero_tp_queries: usize,
}

impl SearchMetrics {
    fn empty() -> Self {
        SearchMetrics { map: 0.0, top1: 0.0, top5: 0.0, top10: 0.0, num_queries: 0, zero_tp_queries: 0 }
    }
}

/// Per-query average precision over the ranked gallery detections. Exposed
/// for oracle tests.
///
/// `candidates` are (similarity, image index, detection) across the query's
/// gallery; `gts_per_image[i]` lists the GT boxes of the query identity in
/// gallery image `i`. Returns (ap, rank of first true match).
pub fn query_ap(
    candidates: &[(f64, usize, &Detection)],
    gts_per_image: &[Vec<BoundingBox>],
) -> (f64, Option<usize>) {
    let total_relevant: usize = gts_per_image.iter().map(|g| g.len()).sum();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, _, da) = &candidates[a];
        let (sb, _, db) = &candidates[b];
        (std::cmp::Reverse(Ordered(*sa)), det_rank_key(da))
            .partial_cmp(&(std::cmp::Reverse(Ordered(*sb)), det_rank_key(db)))
            .unwrap()
    });
    let mut claimed: Vec<Vec<bool>> = gts_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut labels = Vec::with_capacity(candidates.len());
    let mut first_tp = None;
    for (rank, &ci) in order.iter().enumerate() {
        let (_, img, det) = &candidates[ci];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts_per_image[*img].iter().enumerate() {
            if claimed[*img][gi] {
                continue;
            }
            let v = iou(&det.bbox, gt).unwrap_or(0.0);
            if v > IOU_THRESHOLD && best.map(|(_, bv)| v > bv).unwrap_or(true) {
                best = Some((gi, v));
            }
        }
        let is_tp = if let Some((gi, _)) = best {
            claimed[*img][gi] = true;
            true
        } else {
            false
        };
        if is_tp && first_tp.is_none() {
            first_tp = Some(rank + 1);
        }
        labels.push(is_tp);
    }
    (envelope_ap(&labels, total_relevant), first_tp)
}

/// Search mAP and CMC top-k over a protocol. `gallery_dets` maps image id to
/// its detections (possibly empty); `query_embedding` extracts the query
/// person's embedding from the annotated query box.
pub fn search_map_cmc(
    protocol: &SearchProtocol,
    gallery_dets: &BTreeMap<String, Vec<Detection>>,
    set: &AnnotationSet,
    query_embedding: &mut dyn FnMut(&ProtocolEntry) -> Result<Array1<f64>>,
) -> Result<SearchMetrics> {
    if protocol.entries.is_empty() {
        return Ok(SearchMetrics::empty());
    }
    let mut ap_sum = 0.0;
    let mut hits = [0usize; 3]; // top-1, top-5, top-10
    let mut zero_tp = 0usize;
    for entry in &protocol.entries {
        let q = query_embedding(entry)?;
        let mut candidates: Vec<(f64, usize, &Detection)> = Vec::new();
        let mut gts: Vec<Vec<BoundingBox>> = Vec::with_capacity(entry.gallery.len());
        for (img_idx, image_id) in entry.gallery.iter().enumerate() {
            let rec = set.record(image_id).ok_or_else(|| {
                CoreError::InvalidArgument(format!("gallery image '{image_id}' not in annotations"))
            })?;
            gts.push(
                rec.boxes
                    .iter()
                    .filter(|b| b.identity == entry.identity)
                    .cloned()
                    .collect(),
            );
            if let Some(dets) = gallery_dets.get(image_id) {
                for det in dets {
                    let sim = det.embedding.dot(&q);
                    candidates.push((sim, img_idx, det));
                }
            }
        }
        let (ap, first_tp) = query_ap(&candidates, &gts);
        ap_sum += ap;
        match first_tp {
            Some(rank) => {
                for (i, k) in [1usize, 5, 10].iter().enumerate() {
                    if rank <= *k {
                        hits[i] += 1;
                    }
                }
            }
            None => zero_tp += 1,
        }
    }
    let n = protocol.entries.len() as f64;
    Ok(SearchMetrics {
        map: ap_sum / n,
        top1: hits[0] as f64 / n,
        top5: hits[1] as f64 / n,
        top10: hits[2] as f64 / n,
        num_queries: protocol.entries.len(),
        zero_tp_queries: zero_tp,
    })
}

/// Search metrics for the full protocol plus each altitude bucket's
/// sub-protocol; empty buckets are marked absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub full: SearchMetrics,
    pub buckets: BTreeMap<AltitudeBucket, Option<SearchMetrics>>,
}

pub fn evaluate_stratified(
    protocol: &SearchProtocol,
    gallery_dets: &BTreeMap<String, Vec<Detection>>,
    set: &AnnotationSet,
    query_embedding: &mut dyn FnMut(&ProtocolEntry) -> Result<Array1<f64>>,
) -> Result<StratifiedReport> {
    let full = search_map_cmc(protocol, gallery_dets, set, query_embedding)?;
    let mut buckets = BTreeMap::new();
    for bucket in AltitudeBucket::UAV_BUCKETS {
        let (sub, _report) = crate::data::stratify_by_altitude(protocol, set, bucket)?;
        let metrics = if sub.entries.is_empty() {
            None
        } else {
            Some(search_map_cmc(&sub, gallery_dets, set, query_embedding)?)
        };
        buckets.insert(bucket, metrics);
    }
    Ok(StratifiedReport { full, buckets })
}

/// Combined detection + search report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub detection: Option<DetectionMetrics>,
    pub search: SearchMetrics,
    pub stratified: Option<StratifiedReport>,
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "metrics (AP: all-point interpolation; similarity: cosine)")?;
        if let Some(d) = &self.detection {
            writeln!(
                f,
                "detection: recall {:.4} ({}/{} GT), AP {:.4}",
                d.recall, d.matched_gt, d.total_gt, d.ap
            )?;
        }
        writeln!(
            f,
            "search:    mAP {:.4}  top-1 {:.4}  top-5 {:.4}  top-10 {:.4}  ({} queries, {} without any true match)",
            self.search.map,
            self.search.top1,
            self.search.top5,
            self.search.top10,
            self.search.num_queries,
            self.search.zero_tp_queries
        )?;
        if let Some(s) = &self.stratified {
            writeln!(f, "{:<12} {:>8} {:>8} {:>9}", "bucket", "mAP", "top-1", "queries")?;
            for (bucket, metrics) in &s.buckets {
                match metrics {
                    Some(m) => writeln!(
                        f,
                        "{:<12} {:>8.4} {:>8.4} {:>9}",
                        bucket.label(),
                        m.map,
                        m.top1,
                        m.num_queries
                    )?,
                    None => writeln!(f, "{:<12} {:>8} {:>8} {:>9}", bucket.label(), "-", "-", "absent")?,
                }
            }
            writeln!(
                f,
                "{:<12} {:>8.4} {:>8.4} {:>9}",
                "full", s.full.map, s.full.top1, s.full.num_queries
            )?;
        }
        Ok(())
    }
}
