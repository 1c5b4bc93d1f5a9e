//! Two-round supervised training records.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::llm::Thoughts;
use super::{TemplateKind, VqaSample};
use crate::episode::EpisodeConfig;
use crate::geometry::clamp;
use crate::mark::{apply_mark, MarkError};
use crate::prompts::Protocol;
use crate::protocol::{render, AgentMessage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTurn {
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub system: String,
    /// Original image, then the annotated image when round 1 marks.
    pub images: Vec<String>,
    pub round1: SftTurn,
    /// Absent for records that answer directly in round 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round2: Option<SftTurn>,
}

#[derive(Debug, Error)]
pub enum SftError {
    #[error("sample {0} has no ground-truth box to mark")]
    MissingBox(String),
    #[error("thoughts must be non-empty")]
    EmptyThought,
    #[error("cannot read image {path}: {message}")]
    ImageRead { path: PathBuf, message: String },
    #[error("cannot write image {path}: {message}")]
    ImageWrite { path: PathBuf, message: String },
    #[error(transparent)]
    Mark(#[from] MarkError),
}

/// `dir/stem.png` -> `dir/stem.<sample id>.marked.png`
pub fn annotated_path_for(original: &Path, sample_id: &str) -> PathBuf {
    let stem = original.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let tag: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    original.with_file_name(format!("{stem}.{tag}.marked.png"))
}

/// Draws the sample's ground-truth boxes onto `image`.
pub fn annotate_for_sample(image: &RgbImage, sample: &VqaSample, config: &EpisodeConfig) -> Result<RgbImage, SftError> {
    let dims = sample.dims();
    let boxes: Vec<_> = sample.provenance.gt_boxes.iter().map(|b| clamp(*b, dims)).collect();
    Ok(apply_mark(image, &boxes, &config.mark_style)?)
}

/// Reads `original`, draws the sample's boxes and writes the result to `out`.
pub fn write_annotated_image(
    original: &Path,
    out: &Path,
    sample: &VqaSample,
    config: &EpisodeConfig,
) -> Result<(), SftError> {
    let image = image::open(original)
        .map_err(|e| SftError::ImageRead {
            path: original.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let marked = annotate_for_sample(&image, sample, config)?;
    marked.save(out).map_err(|e| SftError::ImageWrite {
        path: out.to_path_buf(),
        message: e.to_string(),
    })
}

/// Builds the conversation for one validated sample.
///
/// Samples with ground-truth boxes get two rounds (thought + Mark, then
/// thought + Terminate). Presence questions about absent findings have
/// nothing to mark and answer directly in a single round.
pub fn assemble_sft_record(
    sample: &VqaSample,
    thoughts: &Thoughts,
    config: &EpisodeConfig,
    original_image: &str,
    annotated_image: Option<&str>,
) -> Result<SftRecord, SftError> {
    if thoughts.first.trim().is_empty() || thoughts.second.trim().is_empty() {
        return Err(SftError::EmptyThought);
    }
    let boxes = &sample.provenance.gt_boxes;
    if boxes.is_empty() && sample.kind != TemplateKind::Presence {
        return Err(SftError::MissingBox(sample.id.clone()));
    }
    let format = config.format;
    let user1 = config
        .prompts
        .user_round1_text(&sample.question, &sample.options, Protocol::Tar);
    let answer = sample.answer.to_string();
    let system = config.prompts.system_prompt(format).to_owned();

    if boxes.is_empty() {
        let msg = AgentMessage::terminate(Some(thoughts.first.clone()), answer);
        return Ok(SftRecord {
            id: sample.id.clone(),
            system,
            images: vec![original_image.to_owned()],
            round1: SftTurn {
                user: user1,
                assistant: render(&msg, format),
            },
            round2: None,
        });
    }

    let dims = sample.dims();
    let clamped: Vec<_> = boxes.iter().map(|b| clamp(*b, dims)).collect();
    let mark = AgentMessage::mark(thoughts.first.clone(), clamped.clone());
    let terminate = AgentMessage::terminate(Some(thoughts.second.clone()), answer);
    let mut images = vec![original_image.to_owned()];
    images.extend(annotated_image.map(str::to_owned));
    Ok(SftRecord {
        id: sample.id.clone(),
        system,
        images,
        round1: SftTurn {
            user: user1,
            assistant: render(&mark, format),
        },
        round2: Some(SftTurn {
            user: config.feedback.marked_text(&clamped),
            assistant: render(&terminate, format),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::llm::placeholder_thoughts;
    use crate::datagen::{generate, TemplateConfig};
    use crate::geometry::{Annotation, BoundingBox, DetectionRecord};
    use crate::protocol::{parse, ActionFormat};

    fn samples() -> Vec<VqaSample> {
        let r = DetectionRecord {
            image_id: "r".into(),
            image_path: "dir/r.png".into(),
            width: 300,
            height: 200,
            annotations: vec![Annotation {
                category: "mass".into(),
                bbox: BoundingBox::from([20, 20, 60, 70]),
            }],
        };
        let cfg = TemplateConfig {
            categories: vec!["mass".into(), "nodule".into()],
            ..TemplateConfig::default()
        };
        generate(&[r], &cfg, 3).samples
    }

    #[test]
    fn two_round_record_round_trips() {
        for format in [ActionFormat::Explicit, ActionFormat::Implicit] {
            let cfg = EpisodeConfig::with_format(format);
            for s in samples().iter().filter(|s| !s.provenance.gt_boxes.is_empty()) {
                let rec = assemble_sft_record(s, &placeholder_thoughts(s), &cfg, "r.png", Some("r.m.png")).unwrap();
                let r1 = parse(&rec.round1.assistant, format).unwrap();
                assert!(r1.thought_text().is_some());
                assert_eq!(r1.mark_boxes(), s.provenance.gt_boxes);
                let r2 = parse(&rec.round2.as_ref().unwrap().assistant, format).unwrap();
                assert_eq!(r2.answer(), Some(s.answer.to_string().as_str()));
                assert_eq!(rec.images.len(), 2);
                if format == ActionFormat::Implicit {
                    assert!(rec.round1.assistant.contains("<bbox>"));
                    assert!(rec.round2.as_ref().unwrap().assistant.contains("<answer>"));
                }
            }
        }
    }

    #[test]
    fn absent_presence_is_single_round() {
        let s = samples()
            .into_iter()
            .find(|s| s.kind == TemplateKind::Presence && s.provenance.gt_boxes.is_empty())
            .unwrap();
        let rec = assemble_sft_record(&s, &placeholder_thoughts(&s), &EpisodeConfig::default(), "r.png", None).unwrap();
        assert!(rec.round2.is_none());
        let m = parse(&rec.round1.assistant, ActionFormat::Explicit).unwrap();
        assert_eq!(m.answer(), Some(s.answer.to_string().as_str()));
        assert!(!m.has_mark());
    }

    #[test]
    fn missing_box_is_an_error() {
        let mut s = samples()
            .into_iter()
            .find(|s| s.kind == TemplateKind::BboxChoice)
            .unwrap();
        s.provenance.gt_boxes.clear();
        let err = assemble_sft_record(&s, &placeholder_thoughts(&s), &EpisodeConfig::default(), "r.png", None);
        assert!(matches!(err, Err(SftError::MissingBox(_))));
    }

    #[test]
    fn annotated_path_sits_beside_original() {
        let p = annotated_path_for(Path::new("/data/img/x1.png"), "x1:bbox_choice:mass");
        assert_eq!(p, PathBuf::from("/data/img/x1.x1_bbox_choice_mass.marked.png"));
    }
}
