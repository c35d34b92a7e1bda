//! Summary statistics over an annotation set.

use std::collections::BTreeMap;

use super::{AnnotationSet, Camera};

/// Box-width histogram with fixed-width bins starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthHistogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl WidthHistogram {
    fn from_widths(widths: impl Iterator<Item = f64>, bin_width: f64) -> Self {
        let mut counts: Vec<u64> = Vec::new();
        for w in widths {
            let bin = (w / bin_width).floor() as usize;
            if counts.len() <= bin {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
        }
        WidthHistogram { bin_width, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub images: usize,
    pub identities: usize,
    pub labeled_boxes: usize,
    pub unlabeled_boxes: usize,
    pub total_boxes: usize,
    /// labeled boxes / identities; 0 when the set has no identities.
    pub boxes_per_id_mean: f64,
    pub width_hist: BTreeMap<Camera, WidthHistogram>,
}

const WIDTH_BIN: f64 = 5.0;

pub fn dataset_stats(set: &AnnotationSet) -> DatasetStats {
    let labeled = set.labeled_box_count();
    let ids = set.identity_universe().len();
    let mut width_hist = BTreeMap::new();
    for camera in [Camera::Ground, Camera::Uav] {
        let widths = set
            .images_with_camera(camera)
            .flat_map(|r| r.boxes.iter().map(|b| b.w));
        width_hist.insert(camera, WidthHistogram::from_widths(widths, WIDTH_BIN));
    }
    DatasetStats {
        images: set.num_images(),
        identities: ids,
        labeled_boxes: labeled,
        unlabeled_boxes: set.unlabeled_box_count(),
        total_boxes: set.total_box_count(),
        boxes_per_id_mean: if ids == 0 { 0.0 } else { labeled as f64 / ids as f64 },
        width_hist,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "images:          {}", self.images)?;
        writeln!(f, "identities:      {}", self.identities)?;
        writeln!(f, "labeled boxes:   {}", self.labeled_boxes)?;
        writeln!(f, "unlabeled boxes: {}", self.unlabeled_boxes)?;
        writeln!(f, "total boxes:     {}", self.total_boxes)?;
        writeln!(f, "boxes per id:    {:.2}", self.boxes_per_id_mean)?;
        for (camera, hist) in &self.width_hist {
            writeln!(f, "width histogram ({camera}), bin {}px:", hist.bin_width)?;
            for (i, c) in hist.counts.iter().enumerate() {
                if *c > 0 {
                    writeln!(
                        f,
                        "  [{:>3}-{:>3}): {c}",
                        (i as f64 * hist.bin_width) as u64,
                        ((i + 1) as f64 * hist.bin_width) as u64
                    )?;
                }
            }
        }
        Ok(())
    }
}
