//! Reading detection annotations.
//!
//! Two inputs are understood: the canonical JSONL schema (one
//! [`DetectionRecord`] per line, `bbox` as `[x1, y1, x2, y2]`) and COCO-style
//! JSON (`bbox` as `[x, y, w, h]`, categories by id). Boxes are clamped into
//! the image; records with bad entries are reported and skipped.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{clamp, Annotation, BoundingBox, DetectionRecord, ImageDims};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionFormat {
    #[default]
    Jsonl,
    Coco,
}

impl std::str::FromStr for DetectionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "canonical" => Ok(DetectionFormat::Jsonl),
            "coco" => Ok(DetectionFormat::Coco),
            other => Err(format!("unknown detection format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub format: DetectionFormat,
    /// Skip records whose image file does not exist.
    pub check_images: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            format: DetectionFormat::Jsonl,
            check_images: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub records: Vec<DetectionRecord>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

/// Relative image paths are taken relative to the annotation file's directory.
pub fn resolve_image_path(base_dir: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

pub fn ingest_detections(path: &Path, options: IngestOptions) -> Result<IngestReport, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut report = match options.format {
        DetectionFormat::Jsonl => from_jsonl(&text),
        DetectionFormat::Coco => from_coco(&text).map_err(|message| IngestError::Parse {
            path: path.to_path_buf(),
            message,
        })?,
    };
    if options.check_images {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut kept = Vec::with_capacity(report.records.len());
        for r in std::mem::take(&mut report.records) {
            if resolve_image_path(base, &r.image_path).is_file() {
                kept.push(r);
            } else {
                let msg = format!("{}: image {} not found, skipping", r.image_id, r.image_path);
                tracing::warn!("{msg}");
                report.warnings.push(msg);
            }
        }
        report.records = kept;
    }
    Ok(report)
}

#[derive(Deserialize)]
struct RawRecord {
    image_id: String,
    image_path: String,
    width: u32,
    height: u32,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    category: String,
    bbox: [f64; 4],
}

/// Parses canonical JSONL text. Bad lines are collected, not fatal.
pub fn from_jsonl(text: &str) -> IngestReport {
    let mut report = IngestReport::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(format!("line {}: {e}", n + 1));
                continue;
            }
        };
        let anns = raw.annotations.into_iter().map(|a| (a.category, a.bbox)).collect();
        match build_record(
            raw.image_id,
            raw.image_path,
            raw.width,
            raw.height,
            anns,
            &mut report.warnings,
        ) {
            Ok(r) => report.records.push(r),
            Err(e) => report.errors.push(format!("line {}: {e}", n + 1)),
        }
    }
    report
}

fn build_record(
    image_id: String,
    image_path: String,
    width: u32,
    height: u32,
    anns: Vec<(String, [f64; 4])>,
    warnings: &mut Vec<String>,
) -> Result<DetectionRecord, String> {
    let dims = ImageDims::new(width, height).map_err(|e| format!("{image_id}: {e}"))?;
    let mut annotations = Vec::with_capacity(anns.len());
    for (category, coords) in anns {
        let category = category.trim().to_owned();
        if category.is_empty() {
            return Err(format!("{image_id}: annotation with empty category"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(format!("{image_id}: non-finite coordinate in {coords:?}"));
        }
        let raw = BoundingBox::raw(
            coords[0].floor() as i64,
            coords[1].floor() as i64,
            coords[2].floor() as i64,
            coords[3].floor() as i64,
        );
        let bbox = clamp(raw, dims);
        if bbox != raw {
            let msg = format!("{image_id}: {category} box {raw} clamped to {bbox}");
            tracing::warn!("{msg}");
            warnings.push(msg);
        }
        annotations.push(Annotation { category, bbox });
    }
    Ok(DetectionRecord {
        image_id,
        image_path,
        width,
        height,
        annotations,
    })
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Value,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: Value,
    category_id: Value,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: Value,
    name: String,
}

fn id_key(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses COCO-style JSON; `bbox` is `[x, y, width, height]`.
pub fn from_coco(text: &str) -> Result<IngestReport, String> {
    let coco: CocoFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut report = IngestReport::default();
    let names: HashMap<String, &str> = coco
        .categories
        .iter()
        .map(|c| (id_key(&c.id), c.name.as_str()))
        .collect();

    let mut per_image: HashMap<String, Vec<(String, [f64; 4])>> = HashMap::new();
    for (i, a) in coco.annotations.iter().enumerate() {
        let Some(name) = names.get(&id_key(&a.category_id)) else {
            report
                .errors
                .push(format!("annotation {i}: unknown category id {}", a.category_id));
            continue;
        };
        let [x, y, w, h] = a.bbox;
        per_image
            .entry(id_key(&a.image_id))
            .or_default()
            .push((name.to_string(), [x, y, x + w, y + h]));
    }

    for img in coco.images {
        let key = id_key(&img.id);
        let anns = per_image.remove(&key).unwrap_or_default();
        match build_record(key, img.file_name, img.width, img.height, anns, &mut report.warnings) {
            Ok(r) => report.records.push(r),
            Err(e) => report.errors.push(e),
        }
    }
    let mut orphans: Vec<_> = per_image.into_keys().collect();
    orphans.sort();
    for id in orphans {
        report
            .errors
            .push(format!("annotations reference unknown image id {id}"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_two_records() {
        let text = r#"{"image_id":"a","image_path":"a.png","width":100,"height":80,"annotations":[{"category":"mass","bbox":[1,2,30,40]}]}
{"image_id":"b","image_path":"b.png","width":100,"height":80,"annotations":[]}
"#;
        let r = from_jsonl(text);
        assert_eq!(r.records.len(), 2);
        assert!(r.errors.is_empty() && r.warnings.is_empty());
        assert_eq!(r.records[0].annotations[0].bbox, BoundingBox::from([1, 2, 30, 40]));
        assert!(r.records[1].annotations.is_empty());
    }

    #[test]
    fn jsonl_clamps_and_reports() {
        let text = r#"{"image_id":"a","image_path":"a.png","width":100,"height":80,"annotations":[{"category":"mass","bbox":[-3,2.7,300,40]}]}
not json
{"image_id":"c","image_path":"c.png","width":0,"height":80}
{"image_id":"d","image_path":"d.png","width":10,"height":10,"annotations":[{"category":" ","bbox":[1,1,2,2]}]}"#;
        let r = from_jsonl(text);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].annotations[0].bbox, BoundingBox::from([0, 2, 100, 40]));
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.errors.len(), 3);
    }

    #[test]
    fn coco_resolves_categories() {
        let text = r#"{
          "images": [{"id": 1, "file_name": "x.png", "width": 200, "height": 100},
                     {"id": 2, "file_name": "y.png", "width": 200, "height": 100}],
          "annotations": [{"image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40]},
                          {"image_id": 1, "category_id": 9, "bbox": [0, 0, 5, 5]},
                          {"image_id": 5, "category_id": 7, "bbox": [0, 0, 5, 5]}],
          "categories": [{"id": 7, "name": "nodule"}]
        }"#;
        let r = from_coco(text).unwrap();
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.records[0].image_id, "1");
        assert_eq!(r.records[0].annotations[0].category, "nodule");
        assert_eq!(r.records[0].annotations[0].bbox, BoundingBox::from([10, 20, 40, 60]));
        assert!(r.records[1].annotations.is_empty());
        assert_eq!(r.errors.len(), 2);
    }

    #[test]
    fn missing_images_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("here.png"), b"x").unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"image_id\":\"a\",\"image_path\":\"here.png\",\"width\":4,\"height\":4}\n{\"image_id\":\"b\",\"image_path\":\"gone.png\",\"width\":4,\"height\":4}\n",
        )
        .unwrap();
        let r = ingest_detections(&path, IngestOptions::default()).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.warnings.len(), 1);
        let r = ingest_detections(
            &path,
            IngestOptions {
                check_images: false,
                ..IngestOptions::default()
            },
        )
        .unwrap();
        assert_eq!(r.records.len(), 2);
        assert!(matches!(
            ingest_detections(&dir.path().join("nope.jsonl"), IngestOptions::default()),
            Err(IngestError::Io { .. })
        ));
    }
}
