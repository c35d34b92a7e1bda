//! Line-delimited JSON annotation files: one image record per line with an
//! explicit version field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AltitudeBucket, AnnotationSet, BoundingBox, Camera, ImageRecord, Split};
use crate::error::{CoreError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    version: u32,
    image_id: String,
    file: String,
    camera: Camera,
    altitude_bucket: AltitudeBucket,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    height: Option<u32>,
    boxes: Vec<BoxLine>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxLine {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    id: i64,
}

/// Load and validate an annotation file. Box counting, identity-universe
/// construction, and all per-record invariants happen here; a malformed line
/// is reported with its line number and offending field.
pub fn load_annotations(path: &Path, split: Split) -> Result<AnnotationSet> {
    let file = File::open(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(&line).map_err(|e| CoreError::Schema {
                file: path.to_path_buf(),
                line: lineno,
                message: e.to_string(),
            })?;
        if parsed.version != SCHEMA_VERSION {
            return Err(CoreError::Schema {
                file: path.to_path_buf(),
                line: lineno,
                message: format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    parsed.version
                ),
            });
        }
        if !seen.insert(parsed.image_id.clone()) {
            return Err(CoreError::DuplicateImageId {
                image_id: parsed.image_id,
                file: path.to_path_buf(),
            });
        }
        let record = ImageRecord {
            image_id: parsed.image_id,
            file: parsed.file,
            camera: parsed.camera,
            altitude_bucket: parsed.altitude_bucket,
            width: parsed.width,
            height: parsed.height,
            boxes: parsed
                .boxes
                .into_iter()
                .map(|b| BoundingBox::new(b.x, b.y, b.w, b.h, b.id))
                .collect(),
        };
        record.validate().map_err(|message| CoreError::Schema {
            file: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        records.push(record);
    }
    AnnotationSet::from_records(split, records)
}

/// Write an annotation set in the line schema, one record per line, in
/// stored record order. Round-trips through [`load_annotations`].
pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for rec in set.records() {
        let line = RecordLine {
            version: SCHEMA_VERSION,
            image_id: rec.image_id.clone(),
            file: rec.file.clone(),
            camera: rec.camera,
            altitude_bucket: rec.altitude_bucket,
            width: rec.width,
            height: rec.height,
            boxes: rec
                .boxes
                .iter()
                .map(|b| BoxLine { x: b.x, y: b.y, w: b.w, h: b.h, id: b.identity })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &line).map_err(|e| CoreError::Schema {
            file: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        writer.write_all(b"\n").map_err(|source| CoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    writer.flush().map_err(|source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}
