//! Query/gallery search-protocol construction and altitude stratification.
//!
//! Each test identity gets one ground-camera query image and a gallery of
//! UAV images: `positives` of them contain the identity, the rest are
//! distractors sampled without replacement. All sampling is seeded, so the
//! same (set, seed) pair always produces a byte-identical protocol file.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AltitudeBucket, AnnotationSet, BoundingBox, Camera};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEntry {
    pub identity: i64,
    pub query_image: String,
    pub query_box: BoundingBox,
    pub gallery: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchProtocol {
    pub seed: u64,
    pub gallery_size: usize,
    pub positives: usize,
    pub entries: Vec<ProtocolEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedIdentity {
    pub identity: i64,
    pub reason: String,
}

/// Identities that could not be given a protocol entry, and why.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<SkippedIdentity>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }
}

/// Build the search protocol over a test split.
pub fn build_search_protocol(
    test: &AnnotationSet,
    gallery_size: usize,
    positives: usize,
    seed: u64,
) -> Result<(SearchProtocol, SkipReport)> {
    if positives == 0 || gallery_size < positives {
        return Err(CoreError::InvalidArgument(format!(
            "need 0 < positives <= gallery_size, got {positives}/{gallery_size}"
        )));
    }
    let uav_images: Vec<&str> = test
        .images_with_camera(Camera::Uav)
        .map(|r| r.image_id.as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut report = SkipReport::default();

    for &identity in test.identity_universe() {
        let ground_with_id: Vec<&str> = test
            .images_with_camera(Camera::Ground)
            .filter(|r| r.contains_identity(identity))
            .map(|r| r.image_id.as_str())
            .collect();
        let uav_with_id: Vec<&str> = uav_images
            .iter()
            .copied()
            .filter(|id| test.record(id).unwrap().contains_identity(identity))
            .collect();
        let distractor_pool: Vec<&str> = uav_images
            .iter()
            .copied()
            .filter(|id| !test.record(id).unwrap().contains_identity(identity))
            .collect();

        if ground_with_id.is_empty() {
            report.skipped.push(SkippedIdentity {
                identity,
                reason: "no ground-camera image contains this identity".into(),
            });
            continue;
        }
        if uav_with_id.len() < positives {
            report.skipped.push(SkippedIdentity {
                identity,
                reason: format!(
                    "appears in only {} UAV images (need {positives})",
                    uav_with_id.len()
                ),
            });
            continue;
        }
        let distractors_needed = gallery_size - positives;
        if distractor_pool.len() < distractors_needed {
            report.skipped.push(SkippedIdentity {
                identity,
                reason: format!(
                    "only {} distractor UAV images available (need {distractors_needed})",
                    distractor_pool.len()
                ),
            });
            continue;
        }

        let query_image = *ground_with_id.choose(&mut rng).unwrap();
        let query_box = test
            .record(query_image)
            .unwrap()
            .boxes
            .iter()
            .find(|b| b.identity == identity)
            .unwrap()
            .clone();
        let mut gallery: Vec<String> = uav_with_id
            .choose_multiple(&mut rng, positives)
            .map(|s| s.to_string())
            .collect();
        gallery.extend(
            distractor_pool
                .choose_multiple(&mut rng, distractors_needed)
                .map(|s| s.to_string()),
        );
        gallery.sort();
        entries.push(ProtocolEntry { identity, query_image: query_image.to_string(), query_box, gallery });
    }

    let protocol = SearchProtocol { seed, gallery_size, positives, entries };
    Ok((protocol, report))
}

impl SearchProtocol {
    /// Assert protocol soundness against an annotation set by direct scan:
    /// camera separation and the exact positive count per entry.
    pub fn validate(&self, set: &AnnotationSet) -> Result<()> {
        for entry in &self.entries {
            let q = set.record(&entry.query_image).ok_or_else(|| {
                CoreError::Integrity(format!("query image '{}' missing", entry.query_image))
            })?;
            if q.camera != Camera::Ground {
                return Err(CoreError::Integrity(format!(
                    "query image '{}' is not a ground image",
                    entry.query_image
                )));
            }
            if entry.gallery.len() != self.gallery_size {
                return Err(CoreError::Integrity(format!(
                    "identity {}: gallery has {} images, expected {}",
                    entry.identity,
                    entry.gallery.len(),
                    self.gallery_size
                )));
            }
            let unique: BTreeSet<&String> = entry.gallery.iter().collect();
            if unique.len() != entry.gallery.len() {
                return Err(CoreError::Integrity(format!(
                    "identity {}: gallery contains duplicates",
                    entry.identity
                )));
            }
            let mut found = 0usize;
            for g in &entry.gallery {
                let rec = set.record(g).ok_or_else(|| {
                    CoreError::Integrity(format!("gallery image '{g}' missing"))
                })?;
                if rec.camera != Camera::Uav {
                    return Err(CoreError::Integrity(format!(
                        "gallery image '{g}' is not a UAV image"
                    )));
                }
                if rec.contains_identity(entry.identity) {
                    found += 1;
                }
            }
            if found != self.positives {
                return Err(CoreError::Integrity(format!(
                    "identity {}: {found} positive gallery images, expected {}",
                    entry.identity, self.positives
                )));
            }
        }
        Ok(())
    }
}

/// Entries dropped during stratification, and why.
pub type StratifyReport = SkipReport;

/// Restrict a protocol to gallery images of one altitude bucket. Entries
/// whose positives all fall outside the bucket are dropped into the report.
pub fn stratify_by_altitude(
    protocol: &SearchProtocol,
    set: &AnnotationSet,
    bucket: AltitudeBucket,
) -> Result<(SearchProtocol, StratifyReport)> {
    if bucket == AltitudeBucket::NotApplicable {
        return Err(CoreError::InvalidArgument(
            "stratification bucket must be one of the UAV altitude ranges".into(),
        ));
    }
    let mut entries = Vec::new();
    let mut report = SkipReport::default();
    for entry in &protocol.entries {
        let gallery: Vec<String> = entry
            .gallery
            .iter()
            .filter(|g| {
                set.record(g).map(|r| r.altitude_bucket == bucket).unwrap_or(false)
            })
            .cloned()
            .collect();
        let positives_present = gallery
            .iter()
            .filter(|g| set.record(g).unwrap().contains_identity(entry.identity))
            .count();
        if positives_present == 0 {
            report.skipped.push(SkippedIdentity {
                identity: entry.identity,
                reason: format!("no positive gallery images in bucket {bucket}"),
            });
            continue;
        }
        entries.push(ProtocolEntry { gallery, ..entry.clone() });
    }
    Ok((
        SearchProtocol {
            seed: protocol.seed,
            gallery_size: protocol.gallery_size,
            positives: protocol.positives,
            entries,
        },
        report,
    ))
}

pub fn save_protocol(protocol: &SearchProtocol, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, protocol)
        .map_err(|e| CoreError::Integrity(format!("protocol serialization: {e}")))?;
    use std::io::Write;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

pub fn load_protocol(path: &Path) -> Result<SearchProtocol> {
    let file = File::open(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CoreError::Integrity(format!("protocol parse: {e}")))
}
