//! Seeded synthetic dual-view datasets for desk-scale verification.
//!
//! Persons are identity-coded textured rectangles rendered onto noisy
//! backgrounds. The ground view renders them at full size; the UAV view
//! scales widths by `scale_ratio_uav`, mimicking the resolution gap between
//! the two platforms. Identities are consistent across views and everything
//! is reproducible from the seed.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    save_annotations, AltitudeBucket, AnnotationSet, BoundingBox, Camera, ImageRecord, Split,
};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_ids: usize,
    /// Train images per camera view.
    pub images_per_view: usize,
    /// Square image edge in pixels.
    pub image_size: u32,
    /// UAV person width relative to ground person width.
    pub scale_ratio_uav: f64,
    /// Nominal ground-view person width in pixels (height is twice the width).
    pub ground_person_width: u32,
    /// Labeled persons per train image.
    pub persons_per_image: usize,
    /// Unlabeled (-1) distractor persons per train image.
    pub unlabeled_per_image: usize,
    /// UAV images in the test split.
    pub test_uav_images: usize,
    /// UAV test images containing each identity.
    pub test_positives_per_id: usize,
    /// Unlabeled distractors per UAV test image.
    pub test_unlabeled_per_image: usize,
    /// Altitude buckets cycled over the UAV images.
    pub altitude_buckets: Vec<AltitudeBucket>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_ids: 8,
            images_per_view: 24,
            image_size: 64,
            scale_ratio_uav: 0.5,
            ground_person_width: 12,
            persons_per_image: 2,
            unlabeled_per_image: 1,
            test_uav_images: 60,
            test_positives_per_id: 10,
            test_unlabeled_per_image: 1,
            altitude_buckets: AltitudeBucket::UAV_BUCKETS.to_vec(),
        }
    }
}

/// In-memory pixel data keyed by the annotation `file` field.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: BTreeMap<String, RgbImage>,
}

impl ImageStore {
    pub fn get(&self, file: &str) -> Option<&RgbImage> {
        self.images.get(file)
    }

    pub fn insert(&mut self, file: String, img: RgbImage) {
        self.images.insert(file, img);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn files(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    /// Write every image as PNG under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| CoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (file, img) in &self.images {
            let path = dir.join(file);
            img.save(&path)
                .map_err(|e| CoreError::Integrity(format!("writing {}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Load the pixel files referenced by an annotation set from `dir`.
    pub fn load_for(set: &AnnotationSet, dir: &Path) -> Result<Self> {
        let mut store = ImageStore::default();
        for rec in set.records() {
            if store.images.contains_key(&rec.file) {
                continue;
            }
            let path = dir.join(&rec.file);
            let img = image::open(&path)
                .map_err(|e| CoreError::Integrity(format!("reading {}: {e}", path.display())))?
                .to_rgb8();
            store.images.insert(rec.file.clone(), img);
        }
        Ok(store)
    }
}

/// Convert to a (3,H,W) array of [0,1] values, channel-first.
pub fn image_to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

#[derive(Debug)]
pub struct SynthDataset {
    pub train: AnnotationSet,
    pub test: AnnotationSet,
    pub images: ImageStore,
}

impl SynthDataset {
    /// Write annotations (`annotations_train.jsonl`, `annotations_test.jsonl`)
    /// and an `images/` directory under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| CoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        save_annotations(&self.train, &dir.join("annotations_train.jsonl"))?;
        save_annotations(&self.test, &dir.join("annotations_test.jsonl"))?;
        self.images.write_dir(&dir.join("images"))
    }
}

struct Placement {
    bbox: BoundingBox,
    color: [u8; 3],
    brightness: f64,
}

/// Generate a (train, test) synthetic dataset pair with pixel data.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    validate_config(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut images = ImageStore::default();

    let train = generate_train(config, &mut rng, &mut images)?;
    let test = generate_test(config, &mut rng, &mut images)?;
    Ok(SynthDataset { train, test, images })
}

fn validate_config(config: &SynthConfig) -> Result<()> {
    if config.num_ids < 2 {
        return Err(CoreError::Config(format!(
            "num_ids must be >= 2 (the search protocol needs distractor identities), got {}",
            config.num_ids
        )));
    }
    if !(config.scale_ratio_uav > 0.0 && config.scale_ratio_uav <= 1.5) {
        return Err(CoreError::Config(format!(
            "scale_ratio_uav must be in (0, 1.5], got {}",
            config.scale_ratio_uav
        )));
    }
    let max_h = 2 * (config.ground_person_width + 2);
    if max_h + 2 >= config.image_size {
        return Err(CoreError::Config(format!(
            "image_size {} too small for ground persons of height up to {max_h}",
            config.image_size
        )));
    }
    if config.altitude_buckets.is_empty()
        || config.altitude_buckets.contains(&AltitudeBucket::NotApplicable)
    {
        return Err(CoreError::Config(
            "altitude_buckets must be a non-empty list of UAV ranges".into(),
        ));
    }
    if config.test_positives_per_id > config.test_uav_images {
        return Err(CoreError::Config(
            "test_positives_per_id cannot exceed test_uav_images".into(),
        ));
    }
    Ok(())
}

fn generate_train(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    images: &mut ImageStore,
) -> Result<AnnotationSet> {
    let mut records = Vec::new();
    for camera in [Camera::Ground, Camera::Uav] {
        for i in 0..config.images_per_view {
            let mut ids: Vec<usize> = (0..config.persons_per_image)
                .map(|j| (i * config.persons_per_image + j) % config.num_ids)
                .collect();
            ids.dedup();
            let record = render_record(
                config,
                rng,
                images,
                &format!("train_{camera}_{i:04}"),
                camera,
                bucket_for(config, camera, i),
                &ids,
                config.unlabeled_per_image,
            )?;
            records.push(record);
        }
    }
    AnnotationSet::from_records(Split::Train, records)
}

fn generate_test(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    images: &mut ImageStore,
) -> Result<AnnotationSet> {
    let mut records = Vec::new();
    // one ground query image per identity
    for id in 0..config.num_ids {
        let record = render_record(
            config,
            rng,
            images,
            &format!("test_ground_{id:04}"),
            Camera::Ground,
            AltitudeBucket::NotApplicable,
            &[id],
            0,
        )?;
        records.push(record);
    }
    // UAV gallery images; identity k occupies a consecutive block of images
    let n = config.test_uav_images;
    let mut occupants: Vec<Vec<usize>> = vec![Vec::new(); n];
    for id in 0..config.num_ids {
        let offset = id * (n / config.num_ids);
        for t in 0..config.test_positives_per_id {
            occupants[(offset + t) % n].push(id);
        }
    }
    for (i, ids) in occupants.iter().enumerate() {
        let record = render_record(
            config,
            rng,
            images,
            &format!("test_uav_{i:04}"),
            Camera::Uav,
            bucket_for(config, Camera::Uav, i),
            ids,
            config.test_unlabeled_per_image,
        )?;
        records.push(record);
    }
    AnnotationSet::from_records(Split::Test, records)
}

fn bucket_for(config: &SynthConfig, camera: Camera, index: usize) -> AltitudeBucket {
    match camera {
        Camera::Ground => AltitudeBucket::NotApplicable,
        Camera::Uav => config.altitude_buckets[index % config.altitude_buckets.len()],
    }
}

#[allow(clippy::too_many_arguments)]
fn render_record(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    images: &mut ImageStore,
    image_id: &str,
    camera: Camera,
    bucket: AltitudeBucket,
    labeled_ids: &[usize],
    unlabeled: usize,
) -> Result<ImageRecord> {
    let size = config.image_size;
    let mut placements: Vec<Placement> = Vec::new();

    for &id in labeled_ids {
        let bbox = place_person(config, rng, camera, id as i64, &placements, image_id)?;
        placements.push(Placement {
            bbox,
            color: id_color(id, config.num_ids),
            brightness: rng.gen_range(0.92..1.08),
        });
    }
    for _ in 0..unlabeled {
        let bbox = place_person(config, rng, camera, -1, &placements, image_id)?;
        let hue = rng.gen_range(0.0..360.0);
        placements.push(Placement {
            bbox,
            color: hsv_to_rgb(hue, 0.25, 0.8),
            brightness: rng.gen_range(0.92..1.08),
        });
    }

    let img = render_image(rng, size, &placements);
    let file = format!("{image_id}.png");
    images.insert(file.clone(), img);

    Ok(ImageRecord {
        image_id: image_id.to_string(),
        file,
        camera,
        altitude_bucket: bucket,
        width: Some(size),
        height: Some(size),
        boxes: placements.into_iter().map(|p| p.bbox).collect(),
    })
}

fn place_person(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    camera: Camera,
    identity: i64,
    placed: &[Placement],
    image_id: &str,
) -> Result<BoundingBox> {
    let size = config.image_size as f64;
    let base = (config.ground_person_width as i64 + rng.gen_range(-2i64..=2)).max(4) as f64;
    let w = match camera {
        Camera::Ground => base,
        Camera::Uav => (base * config.scale_ratio_uav).round().max(3.0),
    };
    let h = 2.0 * w;
    if w + 2.0 >= size || h + 2.0 >= size {
        return Err(CoreError::Config(format!(
            "infeasible placement: person {w}x{h} does not fit in {size}x{size}"
        )));
    }
    for _ in 0..200 {
        let x = rng.gen_range(1.0..size - w - 1.0).floor();
        let y = rng.gen_range(1.0..size - h - 1.0).floor();
        let candidate = BoundingBox::new(x, y, w, h, identity);
        let overlaps = placed.iter().any(|p| {
            candidate.x < p.bbox.x2()
                && p.bbox.x < candidate.x2()
                && candidate.y < p.bbox.y2()
                && p.bbox.y < candidate.y2()
        });
        if !overlaps {
            return Ok(candidate);
        }
    }
    Err(CoreError::Config(format!(
        "infeasible placement: could not fit {} persons into image '{image_id}' of size {size}",
        placed.len() + 1
    )))
}

fn render_image(rng: &mut ChaCha8Rng, size: u32, placements: &[Placement]) -> RgbImage {
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let v = (110i32 + rng.gen_range(-12i32..=12)).clamp(0, 255) as u8;
            img.put_pixel(x, y, Rgb([v, v, v]));
        }
    }
    for p in placements {
        let (x0, y0) = (p.bbox.x as u32, p.bbox.y as u32);
        let (x1, y1) = (p.bbox.x2().min(size as f64) as u32, p.bbox.y2().min(size as f64) as u32);
        for y in y0..y1 {
            // horizontal stripes give the detector texture to latch onto
            let factor = if (y - y0) % 4 == 0 { 0.55 } else { 1.0 } * p.brightness;
            for x in x0..x1 {
                let px = p.color.map(|c| ((c as f64) * factor).clamp(0.0, 255.0) as u8);
                img.put_pixel(x, y, Rgb(px));
            }
        }
    }
    img
}

/// Identity-coded base color: evenly spaced hues at fixed saturation.
fn id_color(id: usize, num_ids: usize) -> [u8; 3] {
    let hue = (id as f64 * 360.0 / num_ids as f64) % 360.0;
    hsv_to_rgb(hue, 0.85, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}
