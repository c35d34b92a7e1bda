//! Dataset ingestion, statistics, the query/gallery search protocol, and the
//! seeded synthetic dual-view generator.
//!
//! Annotations are line-delimited JSON, one image record per line (see
//! [`schema`]). Identities are integer labels; `-1` marks a person that was
//! boxed but not associated across cameras, and such boxes never act as
//! retrieval positives.

mod protocol;
mod schema;
mod stats;
mod synth;

pub use protocol::{
    build_search_protocol, load_protocol, save_protocol, stratify_by_altitude, ProtocolEntry,
    SearchProtocol, SkipReport, SkippedIdentity,
};
pub use schema::{load_annotations, save_annotations, SCHEMA_VERSION};
pub use stats::{dataset_stats, DatasetStats, WidthHistogram};
pub use synth::{image_to_array, synth_generate, ImageStore, SynthConfig, SynthDataset};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Camera platform an image was captured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Camera {
    #[serde(rename = "ground")]
    Ground,
    #[serde(rename = "uav")]
    Uav,
}

impl std::fmt::Display for Camera {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Camera::Ground => write!(f, "ground"),
            Camera::Uav => write!(f, "uav"),
        }
    }
}

/// Flying-height range of the capturing UAV; ground images carry
/// `NotApplicable`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AltitudeBucket {
    #[serde(rename = "20-30m")]
    M20to30,
    #[serde(rename = "30-40m")]
    M30to40,
    #[serde(rename = "40-50m")]
    M40to50,
    #[serde(rename = "50-60m")]
    M50to60,
    #[serde(rename = "not-applicable")]
    NotApplicable,
}

impl AltitudeBucket {
    pub const UAV_BUCKETS: [AltitudeBucket; 4] = [
        AltitudeBucket::M20to30,
        AltitudeBucket::M30to40,
        AltitudeBucket::M40to50,
        AltitudeBucket::M50to60,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AltitudeBucket::M20to30 => "20-30m",
            AltitudeBucket::M30to40 => "30-40m",
            AltitudeBucket::M40to50 => "40-50m",
            AltitudeBucket::M50to60 => "50-60m",
            AltitudeBucket::NotApplicable => "not-applicable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "20-30m" => Ok(AltitudeBucket::M20to30),
            "30-40m" => Ok(AltitudeBucket::M30to40),
            "40-50m" => Ok(AltitudeBucket::M40to50),
            "50-60m" => Ok(AltitudeBucket::M50to60),
            "not-applicable" => Ok(AltitudeBucket::NotApplicable),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown altitude bucket '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for AltitudeBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// An axis-aligned person box in pixel coordinates (top-left corner plus
/// size) with an identity label; `-1` means unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub identity: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, identity: i64) -> Self {
        BoundingBox { x, y, w, h, identity, confidence: None }
    }

    pub fn is_labeled(&self) -> bool {
        self.identity >= 0
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.w > 0.0) {
            return Err(format!("field w must be > 0, got {}", self.w));
        }
        if !(self.h > 0.0) {
            return Err(format!("field h must be > 0, got {}", self.h));
        }
        if self.x < 0.0 || self.y < 0.0 {
            return Err(format!("fields x,y must be >= 0, got ({}, {})", self.x, self.y));
        }
        if self.identity < -1 {
            return Err(format!("field id must be >= -1, got {}", self.identity));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("field confidence must be in [0,1], got {c}"));
            }
        }
        Ok(())
    }
}

/// One annotated image: pixel-data reference plus its person boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file: String,
    pub camera: Camera,
    pub altitude_bucket: AltitudeBucket,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub height: Option<u32>,
    pub boxes: Vec<BoundingBox>,
}

impl ImageRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.camera == Camera::Ground && self.altitude_bucket != AltitudeBucket::NotApplicable
        {
            return Err(format!(
                "record '{}': ground camera requires altitude_bucket not-applicable",
                self.image_id
            ));
        }
        if self.camera == Camera::Uav && self.altitude_bucket == AltitudeBucket::NotApplicable {
            return Err(format!(
                "record '{}': uav camera requires a concrete altitude_bucket",
                self.image_id
            ));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate()
                .map_err(|e| format!("record '{}' box {i}: {e}", self.image_id))?;
            if let (Some(w), Some(h)) = (self.width, self.height) {
                if b.x2() > w as f64 + 1e-9 || b.y2() > h as f64 + 1e-9 {
                    return Err(format!(
                        "record '{}' box {i}: box ({}, {}, {}, {}) exceeds image extent {w}x{h}",
                        self.image_id, b.x, b.y, b.w, b.h
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn identities(&self) -> impl Iterator<Item = i64> + '_ {
        self.boxes.iter().filter(|b| b.is_labeled()).map(|b| b.identity)
    }

    pub fn contains_identity(&self, id: i64) -> bool {
        self.boxes.iter().any(|b| b.identity == id && id >= 0)
    }
}

/// Which partition an annotation set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

/// A validated collection of image records plus the derived set of labeled
/// identities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub split: Split,
    records: Vec<ImageRecord>,
    identity_universe: BTreeSet<i64>,
    by_image: BTreeMap<String, usize>,
}

impl AnnotationSet {
    /// Validate records and build the identity universe. Duplicate image ids
    /// and per-record invariant violations are rejected.
    pub fn from_records(split: Split, records: Vec<ImageRecord>) -> Result<Self> {
        let mut by_image = BTreeMap::new();
        let mut identity_universe = BTreeSet::new();
        for (idx, rec) in records.iter().enumerate() {
            rec.validate().map_err(CoreError::Integrity)?;
            if by_image.insert(rec.image_id.clone(), idx).is_some() {
                return Err(CoreError::Integrity(format!(
                    "duplicate image_id '{}'",
                    rec.image_id
                )));
            }
            identity_universe.extend(rec.identities());
        }
        Ok(AnnotationSet { split, records, identity_universe, by_image })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.by_image.get(image_id).map(|&i| &self.records[i])
    }

    pub fn identity_universe(&self) -> &BTreeSet<i64> {
        &self.identity_universe
    }

    pub fn num_images(&self) -> usize {
        self.records.len()
    }

    pub fn labeled_box_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.boxes.iter().filter(|b| b.is_labeled()).count())
            .sum()
    }

    pub fn unlabeled_box_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.boxes.iter().filter(|b| !b.is_labeled()).count())
            .sum()
    }

    pub fn total_box_count(&self) -> usize {
        self.records.iter().map(|r| r.boxes.len()).sum()
    }

    pub fn images_with_camera(&self, camera: Camera) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.camera == camera)
    }
}
