//! Drawing `Mark` actions onto images.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{clamp, BoundingBox, ImageDims};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarkError {
    #[error("a Mark needs at least one box")]
    NoBoxes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkStyle {
    pub color: [u8; 3],
    /// Fixed stroke width in pixels; `None` scales with the image.
    pub stroke: Option<u32>,
}

impl Default for MarkStyle {
    fn default() -> Self {
        Self {
            color: [255, 0, 0],
            stroke: None,
        }
    }
}

impl MarkStyle {
    /// `max(2, round(0.004 * min(width, height)))` unless fixed.
    pub fn stroke_for(&self, dims: ImageDims) -> u32 {
        self.stroke.unwrap_or_else(|| {
            let short = dims.width.min(dims.height) as f64;
            ((0.004 * short).round() as u32).max(2)
        })
    }
}

/// Inclusive pixel rectangle covered by a clamped box on the raster grid.
fn pixel_extent(b: BoundingBox, dims: ImageDims) -> (u32, u32, u32, u32) {
    let b = clamp(b, dims);
    let xmax = i64::from(dims.width) - 1;
    let ymax = i64::from(dims.height) - 1;
    (
        b.x1.min(xmax) as u32,
        b.y1.min(ymax) as u32,
        b.x2.min(xmax) as u32,
        b.y2.min(ymax) as u32,
    )
}

/// Returns a copy of `image` with each box outlined; `image` is untouched.
///
/// The outline is drawn inside the box: a pixel belongs to the band when it
/// lies in the box and within `stroke` pixels of one of its edges.
pub fn apply_mark(image: &RgbImage, boxes: &[BoundingBox], style: &MarkStyle) -> Result<RgbImage, MarkError> {
    if boxes.is_empty() {
        return Err(MarkError::NoBoxes);
    }
    let mut out = image.clone();
    let dims = ImageDims {
        width: image.width(),
        height: image.height(),
    };
    if dims.width == 0 || dims.height == 0 {
        return Ok(out);
    }
    let s = style.stroke_for(dims);
    let color = Rgb(style.color);
    for &b in boxes {
        let (x1, y1, x2, y2) = pixel_extent(b, dims);
        for y in y1..=y2 {
            let horizontal_band = y < y1 + s || y + s > y2;
            for x in x1..=x2 {
                if horizontal_band || x < x1 + s || x + s > x2 {
                    out.put_pixel(x, y, color);
                }
            }
        }
    }
    Ok(out)
}
