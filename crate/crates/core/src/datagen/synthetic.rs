//! Seeded synthetic detection records for tests and demos.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Annotation, BoundingBox, DetectionRecord};

pub const SYNTHETIC_CATEGORIES: [&str; 6] = [
    "mass",
    "nodule",
    "effusion",
    "pneumothorax",
    "cardiomegaly",
    "atelectasis",
];

/// `n` records with 256-640 px sides and 0-3 boxes each (about one in eight
/// records has no annotations). Image paths are `images/<id>.png`.
pub fn synthetic_records(n: usize, seed: u64) -> Vec<DetectionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let width = rng.random_range(256..=640u32);
            let height = rng.random_range(256..=640u32);
            let count = if rng.random_ratio(1, 8) {
                0
            } else {
                rng.random_range(1..=3)
            };
            let annotations = (0..count)
                .map(|_| {
                    let w = rng.random_range(8..=i64::from(width) / 4);
                    let h = rng.random_range(8..=i64::from(height) / 4);
                    let x = rng.random_range(0..=i64::from(width) - w);
                    let y = rng.random_range(0..=i64::from(height) - h);
                    Annotation {
                        category: SYNTHETIC_CATEGORIES[rng.random_range(0..SYNTHETIC_CATEGORIES.len())].to_owned(),
                        bbox: BoundingBox::raw(x, y, x + w, y + h),
                    }
                })
                .collect();
            let image_id = format!("syn{i:05}");
            DetectionRecord {
                image_path: format!("images/{image_id}.png"),
                image_id,
                width,
                height,
                annotations,
            }
        })
        .collect()
}

/// Gray canvas with a lighter patch inside each annotation.
pub fn render_synthetic_image(record: &DetectionRecord) -> RgbImage {
    let mut img = RgbImage::from_pixel(record.width, record.height, Rgb([40, 40, 40]));
    for a in &record.annotations {
        for y in a.bbox.y1..a.bbox.y2 {
            for x in a.bbox.x1..a.bbox.x2 {
                img.put_pixel(x as u32, y as u32, Rgb([170, 170, 170]));
            }
        }
    }
    img
}

/// Writes every record's image under `base_dir` at its `image_path`.
pub fn write_synthetic_images(records: &[DetectionRecord], base_dir: &Path) -> Result<(), image::ImageError> {
    for r in records {
        let path = base_dir.join(&r.image_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        render_synthetic_image(r).save(&path)?;
    }
    Ok(())
}
