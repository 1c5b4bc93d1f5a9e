//! Detection annotations to multiple-choice VQA samples and SFT records.

pub mod generate;
pub mod ingest;
pub mod llm;
pub mod sft;
pub mod synthetic;
pub mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{BoundingBox, ImageDims, Side};
use crate::question::ChoiceOption;

pub use generate::{generate, make_distractor_boxes, Discard, DistractorError, GenerationOutput};
pub use ingest::{ingest_detections, DetectionFormat, IngestError, IngestOptions, IngestReport};
pub use validate::{geometric_validate, ValidationVerdict, Verdict, VerdictSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Presence,
    HalfLocation,
    BboxChoice,
    PointCategory,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::Presence,
        TemplateKind::HalfLocation,
        TemplateKind::BboxChoice,
        TemplateKind::PointCategory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Presence => "presence",
            TemplateKind::HalfLocation => "half_location",
            TemplateKind::BboxChoice => "bbox_choice",
            TemplateKind::PointCategory => "point_category",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a sample came from and what it asked about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub category: String,
    /// Ground-truth boxes the sample is about (empty for absent categories).
    pub gt_boxes: Vec<BoundingBox>,
    pub seed: u64,
    /// Half asked about by a half-location question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    /// Query point of a point-category question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: String,
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub question: String,
    pub options: Vec<ChoiceOption>,
    pub answer: char,
    pub kind: TemplateKind,
    pub provenance: Provenance,
}

impl VqaSample {
    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.width,
            height: self.height,
        }
    }

    pub fn answer_text(&self) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.letter == self.answer)
            .map(|o| o.text.as_str())
    }
}

/// Question and option wording. Slots in braces are filled per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Wording {
    /// `{category}`
    pub presence_question: String,
    pub yes: String,
    pub no: String,
    /// `{side}`, `{category}`
    pub half_question: String,
    /// `{side}`, `{category}`
    pub half_other_side: String,
    /// `{category}`
    pub half_absent: String,
    /// `{category}`
    pub bbox_question: String,
    /// `{x}`, `{y}`
    pub point_question: String,
    pub other: String,
}

impl Default for Wording {
    fn default() -> Self {
        Self {
            presence_question: "Does the image show {category}?".into(),
            yes: "Yes".into(),
            no: "No".into(),
            half_question: "Does the {side} half of the image show {category}?".into(),
            half_other_side: "No, the {side} half shows {category}".into(),
            half_absent: "No, the image does not show {category}".into(),
            bbox_question: "The image shows {category}. What are its bounding box coordinates?".into(),
            point_question: "What does the coordinate ({x}, {y}) in the image show?".into(),
            other: "Other".into(),
        }
    }
}

impl Wording {
    pub fn fill_category(template: &str, category: &str) -> String {
        template.replace("{category}", category)
    }

    pub fn half(template: &str, side: Side, category: &str) -> String {
        template
            .replace("{side}", side.as_str())
            .replace("{category}", category)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub kinds: Vec<TemplateKind>,
    /// Category vocabulary; empty means every category seen in the records.
    pub categories: Vec<String>,
    /// Presence questions about absent categories per image.
    pub absent_presence_cap: usize,
    /// Maximum wrong categories offered by point-category questions.
    pub point_distractors: usize,
    /// Subject of the generation prompt, e.g. "chest X-rays".
    pub domain: String,
    pub wording: Wording,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            kinds: TemplateKind::ALL.to_vec(),
            categories: Vec::new(),
            absent_presence_cap: 2,
            point_distractors: 3,
            domain: "medical images".into(),
            wording: Wording::default(),
        }
    }
}

impl TemplateConfig {
    pub fn enabled(&self, kind: TemplateKind) -> bool {
        self.kinds.contains(&kind)
    }
}

/// Stable 64-bit FNV-1a over the parts, mixed with `seed`.
pub(crate) fn sub_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
