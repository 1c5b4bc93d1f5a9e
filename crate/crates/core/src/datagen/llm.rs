//! Prompts and calls that involve an external language model: optional
//! paraphrase generation, answer verification, and thought writing.

use serde_json::Value;
use thiserror::Error;

use super::{TemplateConfig, ValidationVerdict, VerdictSource, VqaSample, Wording};
use crate::geometry::{DetectionRecord, Side};
use crate::model::{BackendError, ChatMessage, ChatRequest, ContentPart, GenerationParams, ModelBackend};
use crate::prompts::{fill, image_information, resolution, Prompts};
use crate::question::format_options;

pub const UNPARSEABLE_VERDICT: &str = "unparseable-verdict";

fn categories_of(record: &DetectionRecord, templates: &TemplateConfig) -> Vec<String> {
    if templates.categories.is_empty() {
        record.categories().into_iter().map(str::to_owned).collect()
    } else {
        templates.categories.clone()
    }
}

pub fn build_generation_prompt(record: &DetectionRecord, templates: &TemplateConfig, prompts: &Prompts) -> String {
    let cats = categories_of(record, templates);
    let w = &templates.wording;
    let mut blocks = Vec::new();
    let mut n = 1;
    for cat in &cats {
        blocks.push(format!(
            "Question {n}: {}\nOptions: A) {} B) {}",
            Wording::fill_category(&w.presence_question, cat),
            w.yes,
            w.no
        ));
        n += 1;
        blocks.push(format!(
            "Question {n}: {}\nOptions: A) {} B) {} C) {}\n(Note: The answer is determined based on the bounding box and image resolution. If it is in the middle, discard this question.)",
            Wording::half(&w.half_question, Side::Right, cat),
            w.yes,
            Wording::half(&w.half_other_side, Side::Left, cat),
            Wording::fill_category(&w.half_absent, cat),
        ));
        n += 1;
        blocks.push(format!(
            "Question {n}: {}\nOptions: A) [x1, y1, x2, y2] B) [x1, y1, x2, y2] C) [x1, y1, x2, y2]\n(Note: If there is no {cat}, discard this question. Modify the bounding box coordinates based on the provided information.)",
            Wording::fill_category(&w.bbox_question, cat),
        ));
        n += 1;
    }
    let letters = ['A', 'B', 'C', 'D', 'E'];
    let mut point_opts: Vec<String> = cats
        .iter()
        .take(4)
        .zip(letters)
        .map(|(c, l)| format!("{l}) {c}"))
        .collect();
    point_opts.push(format!("{}) {}", letters[point_opts.len()], w.other));
    blocks.push(format!(
        "Question {n}: {}\nOptions: {}\n(Note: (X, Y) should be filled with the correct coordinates based on the provided bounding box information.)",
        w.point_question.replace("{x}", "X").replace("{y}", "Y"),
        point_opts.join(" "),
    ));

    fill(
        &prompts.generation,
        &[
            ("domain", &templates.domain),
            ("resolution", &resolution(record)),
            ("categories", &cats.join(", ")),
            ("templates", &blocks.join("\n\n")),
            ("image_information", &image_information(record)),
        ],
    )
}

fn sample_slots(sample: &VqaSample, record: &DetectionRecord) -> [(&'static str, String); 5] {
    [
        ("image_information", image_information(record)),
        ("resolution", resolution(record)),
        ("question", sample.question.clone()),
        ("options", format_options(&sample.options)),
        ("answer", sample.answer.to_string()),
    ]
}

fn fill_owned(template: &str, slots: &[(&'static str, String)]) -> String {
    let borrowed: Vec<(&str, &str)> = slots.iter().map(|(k, v)| (*k, v.as_str())).collect();
    fill(template, &borrowed)
}

pub fn build_verification_prompt(sample: &VqaSample, record: &DetectionRecord, prompts: &Prompts) -> String {
    fill_owned(&prompts.verification, &sample_slots(sample, record))
}

pub fn build_thought_prompt(sample: &VqaSample, record: &DetectionRecord, prompts: &Prompts) -> String {
    fill_owned(&prompts.thought, &sample_slots(sample, record))
}

/// Maps a verifier reply onto a verdict.
pub fn interpret_verdict(sample_id: &str, reply: &str) -> ValidationVerdict {
    let r = reply.trim().trim_matches('"').trim();
    if r.starts_with("Correct.") {
        ValidationVerdict::valid(sample_id, VerdictSource::ExternalLlm)
    } else if r.starts_with("Incorrect") || r.starts_with("Format error") {
        ValidationVerdict::invalid(sample_id, VerdictSource::ExternalLlm, r)
    } else {
        ValidationVerdict::invalid(
            sample_id,
            VerdictSource::ExternalLlm,
            format!("{UNPARSEABLE_VERDICT}: {r}"),
        )
    }
}

/// Asks the backend to check the sample. Transport failures are returned as
/// errors so the caller can retry later instead of discarding the sample.
pub fn llm_validate(
    sample: &VqaSample,
    record: &DetectionRecord,
    backend: &dyn ModelBackend,
    prompts: &Prompts,
    params: &GenerationParams,
) -> Result<ValidationVerdict, BackendError> {
    let messages = [ChatMessage::user(vec![ContentPart::Text(build_verification_prompt(
        sample, record, prompts,
    ))])];
    let completion = backend.complete(&ChatRequest {
        messages: &messages,
        params,
        episode_id: Some(&sample.id),
    })?;
    Ok(interpret_verdict(&sample.id, &completion.text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thoughts {
    pub first: String,
    pub second: String,
}

#[derive(Debug, Error)]
pub enum ThoughtError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("thought reply is not a JSON object with \"thought 1\" and \"thought 2\": {0}")]
    Unparseable(String),
}

/// Offline stand-in for model-written thoughts.
pub fn placeholder_thoughts(sample: &VqaSample) -> Thoughts {
    let cat = &sample.provenance.category;
    let n = sample.provenance.gt_boxes.len();
    let answer = sample.answer_text().unwrap_or_default();
    if n == 0 {
        Thoughts {
            first: format!("The question concerns {cat}. No finding that needs marking is visible, so the image can be answered directly."),
            second: format!("With no {cat} present, the answer is {}) {answer}.", sample.answer),
        }
    } else {
        Thoughts {
            first: format!("The question concerns {cat}. There is a candidate finding; I will mark {n} region(s) to inspect it more closely."),
            second: format!("Re-examining the marked region(s), the evidence supports {}) {answer}.", sample.answer),
        }
    }
}

pub fn parse_thoughts(reply: &str) -> Result<Thoughts, ThoughtError> {
    let unparseable = || ThoughtError::Unparseable(reply.chars().take(200).collect());
    let obj = reply
        .match_indices('{')
        .find_map(|(i, _)| {
            serde_json::Deserializer::from_str(&reply[i..])
                .into_iter::<Value>()
                .next()
                .and_then(Result::ok)
                .filter(Value::is_object)
        })
        .ok_or_else(unparseable)?;
    let get = |k: &str| {
        obj.get(k)
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
    };
    match (get("thought 1"), get("thought 2")) {
        (Some(first), Some(second)) => Ok(Thoughts { first, second }),
        _ => Err(unparseable()),
    }
}

pub fn generate_thoughts(
    sample: &VqaSample,
    record: &DetectionRecord,
    backend: &dyn ModelBackend,
    prompts: &Prompts,
    params: &GenerationParams,
) -> Result<Thoughts, ThoughtError> {
    let messages = [ChatMessage::user(vec![ContentPart::Text(build_thought_prompt(
        sample, record, prompts,
    ))])];
    let completion = backend.complete(&ChatRequest {
        messages: &messages,
        params,
        episode_id: Some(&sample.id),
    })?;
    parse_thoughts(&completion.text)
}
