//! Pixel-space bounding-box arithmetic.
//!
//! Boxes are inclusive integer corners `[x1, y1, x2, y2]` with the origin in
//! the top-left corner, `x` growing rightward and `y` downward. Areas are
//! measured on the continuous rectangle, so a box `[0, 0, 10, 10]` has area 100.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("invalid box {0}: corners must satisfy 0 <= x1 <= x2 and 0 <= y1 <= y2")]
    InvalidBox(BoundingBox),
    #[error("box {bbox} lies outside a {dims} image")]
    OutOfBounds { bbox: BoundingBox, dims: ImageDims },
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDims { width: u32, height: u32 },
}

/// Integer pixel box. Serialized as the quadruple `[x1, y1, x2, y2]`.
///
/// Fields are signed so that raw model output and unclamped annotations can be
/// represented before [`clamp`] brings them back into the valid domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BoundingBox {
    /// Builds a box, rejecting negative coordinates and reversed corners.
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, GeometryError> {
        let b = Self::raw(x1, y1, x2, y2);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(GeometryError::InvalidBox(b))
        }
    }

    /// Builds a box without checking invariants.
    pub const fn raw(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        0 <= self.x1 && self.x1 <= self.x2 && 0 <= self.y1 && self.y1 <= self.y2
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when the box fits in `dims` (edges may touch `width`/`height`).
    pub fn within(&self, dims: ImageDims) -> bool {
        self.is_valid() && self.x2 <= i64::from(dims.width) && self.y2 <= i64::from(dims.height)
    }
}

impl From<[i64; 4]> for BoundingBox {
    fn from(a: [i64; 4]) -> Self {
        Self::raw(a[0], a[1], a[2], a[3])
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyDims { width, height });
        }
        Ok(Self { width, height })
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Horizontal placement of a box relative to the vertical midline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Straddle,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Straddle => Side::Straddle,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Straddle => "middle",
        }
    }
}

/// One annotated object in a detection record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub category: String,
    #[serde(rename = "bbox")]
    pub bbox: BoundingBox,
}

/// Ground-truth detections for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl DetectionRecord {
    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.width,
            height: self.height,
        }
    }

    pub fn boxes(&self) -> impl Iterator<Item = BoundingBox> + '_ {
        self.annotations.iter().map(|a| a.bbox)
    }

    pub fn boxes_of<'a>(&'a self, category: &'a str) -> impl Iterator<Item = BoundingBox> + 'a {
        self.annotations
            .iter()
            .filter(move |a| a.category == category)
            .map(|a| a.bbox)
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.annotations.iter().any(|a| a.category == category)
    }

    /// Distinct categories in first-appearance order.
    pub fn categories(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for a in &self.annotations {
            if !out.contains(&a.category.as_str()) {
                out.push(&a.category);
            }
        }
        out
    }
}

pub fn center(b: BoundingBox) -> Point {
    Point::new((b.x1 + b.x2) as f64 / 2.0, (b.y1 + b.y2) as f64 / 2.0)
}

/// Integer center, rounded toward the top-left corner.
pub fn center_px(b: BoundingBox) -> (i64, i64) {
    ((b.x1 + b.x2).div_euclid(2), (b.y1 + b.y2).div_euclid(2))
}

/// Left if the box ends before the midline, Right if it starts after it,
/// Straddle otherwise (touching the midline counts as straddling).
pub fn side_of(b: BoundingBox, dims: ImageDims) -> Result<Side, GeometryError> {
    if !b.within(dims) {
        return Err(GeometryError::OutOfBounds { bbox: b, dims });
    }
    let mid = f64::from(dims.width) / 2.0;
    Ok(if (b.x2 as f64) < mid {
        Side::Left
    } else if (b.x1 as f64) > mid {
        Side::Right
    } else {
        Side::Straddle
    })
}

pub fn intersection(a: BoundingBox, b: BoundingBox) -> Option<BoundingBox> {
    let x1 = a.x1.max(b.x1);
    let y1 = a.y1.max(b.y1);
    let x2 = a.x2.min(b.x2);
    let y2 = a.y2.min(b.y2);
    (x1 < x2 && y1 < y2).then_some(BoundingBox::raw(x1, y1, x2, y2))
}

/// Intersection over union on continuous areas. Zero-area boxes score 0
/// against everything except an exactly equal box.
pub fn iou(a: BoundingBox, b: BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = intersection(a, b).map_or(0, |r| r.area());
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Clips each coordinate into the image and restores corner ordering.
pub fn clamp(b: BoundingBox, dims: ImageDims) -> BoundingBox {
    let w = i64::from(dims.width);
    let h = i64::from(dims.height);
    let (xa, xb) = (b.x1.clamp(0, w), b.x2.clamp(0, w));
    let (ya, yb) = (b.y1.clamp(0, h), b.y2.clamp(0, h));
    BoundingBox::raw(xa.min(xb), ya.min(yb), xa.max(xb), ya.max(yb))
}

pub fn contains(b: BoundingBox, p: Point) -> bool {
    b.x1 as f64 <= p.x && p.x <= b.x2 as f64 && b.y1 as f64 <= p.y && p.y <= b.y2 as f64
}
