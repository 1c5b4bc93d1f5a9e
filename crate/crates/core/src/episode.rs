//! Two-round episode state machine.
//!
//! An episode starts from the image and question (`Round1Pending`). The
//! first agent turn may mark regions, in which case the environment draws
//! them and hands back the annotated image with feedback (`AwaitingFinal`).
//! The second turn must terminate with an answer. A `Terminate` in round 1
//! ends the episode early.

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::sft::{SftRecord, SftTurn};
use crate::geometry::{clamp, BoundingBox, ImageDims};
use crate::mark::{apply_mark, MarkError, MarkStyle};
use crate::model::{ChatMessage, ContentPart, ImageHandle};
use crate::prompts::{Prompts, Protocol};
use crate::protocol::{parse, ActionFormat};
use crate::question::{validate_options, ChoiceOption, OptionsError};

pub const MAX_AGENT_TURNS: usize = 2;

pub const IMAGE_ORIGINAL: &str = "original";
pub const IMAGE_ANNOTATED: &str = "annotated";

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("image could not be decoded: {0}")]
    Image(String),
    #[error(transparent)]
    Options(#[from] OptionsError),
    #[error("episode is already finished")]
    Finished,
    #[error(transparent)]
    Mark(#[from] MarkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    NoAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "reason")]
pub enum EpisodeState {
    Round1Pending,
    AwaitingFinal,
    Terminated,
    Failed(FailReason),
}

impl EpisodeState {
    pub fn is_done(self) -> bool {
        matches!(self, EpisodeState::Terminated | EpisodeState::Failed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    System,
    User,
    Assistant,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub role: TurnRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// Append-only turn history.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript(Vec<TurnRecord>);

impl Transcript {
    pub fn from_records(records: Vec<TurnRecord>) -> Self {
        Self(records)
    }

    pub fn entries(&self) -> &[TurnRecord] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn push(&mut self, role: TurnRole, text: impl Into<String>, image_ref: Option<&str>) {
        self.0.push(TurnRecord {
            role,
            text: text.into(),
            image_ref: image_ref.map(str::to_owned),
        });
    }

    pub fn assistant_texts(&self) -> Vec<&str> {
        self.0
            .iter()
            .filter(|r| r.role == TurnRole::Assistant)
            .map(|r| r.text.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackTemplates {
    /// Slots: `{n}`, `{boxes}`.
    pub marked: String,
    /// Slot: `{error}`.
    pub parse_error: String,
    /// Slot: `{answer}`.
    pub answered: String,
    pub no_answer: String,
}

impl Default for FeedbackTemplates {
    fn default() -> Self {
        Self {
            marked: "Marked {n} region(s) at {boxes}. Continue reasoning over the annotated image and answer the question.".into(),
            parse_error: "Your previous output could not be parsed ({error}). Continue reasoning over the original image and answer the question.".into(),
            answered: "Final answer received: {answer}.".into(),
            no_answer: "No final answer was given; the episode has ended.".into(),
        }
    }
}

impl FeedbackTemplates {
    pub fn marked_text(&self, boxes: &[BoundingBox]) -> String {
        let list = boxes.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
        self.marked
            .replace("{n}", &boxes.len().to_string())
            .replace("{boxes}", &list)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub format: ActionFormat,
    pub prompts: Prompts,
    pub feedback: FeedbackTemplates,
    pub mark_style: MarkStyle,
    /// Order of the round-2 user turn: annotated image before feedback text.
    pub round2_image_first: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            format: ActionFormat::Explicit,
            prompts: Prompts::default(),
            feedback: FeedbackTemplates::default(),
            mark_style: MarkStyle::default(),
            round2_image_first: true,
        }
    }
}

impl EpisodeConfig {
    pub fn with_format(format: ActionFormat) -> Self {
        Self {
            format,
            ..Self::default()
        }
    }
}

/// What the environment hands back after one agent turn.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvResponse {
    pub updated_image: Option<ImageHandle>,
    pub feedback: String,
    pub done: bool,
    pub final_answer: Option<String>,
    pub parse_ok: bool,
}

#[derive(Debug, Clone)]
pub struct Episode {
    id: String,
    image: ImageHandle,
    dims: ImageDims,
    question: String,
    options: Vec<ChoiceOption>,
    ground_truth: Option<String>,
    config: Arc<EpisodeConfig>,
    state: EpisodeState,
    transcript: Transcript,
    annotation_override: Option<ImageHandle>,
    annotated: Option<ImageHandle>,
    parse_ok: Vec<bool>,
    final_answer: Option<String>,
}

impl Episode {
    pub fn new(
        id: impl Into<String>,
        image: impl Into<ImageHandle>,
        question: impl Into<String>,
        options: Vec<ChoiceOption>,
        ground_truth: Option<String>,
        config: Arc<EpisodeConfig>,
    ) -> Result<Self, EpisodeError> {
        validate_options(&options)?;
        let image: ImageHandle = image.into();
        let dims = ImageDims::new(image.width(), image.height()).map_err(|e| EpisodeError::Image(e.to_string()))?;
        let question = question.into();
        let mut transcript = Transcript::default();
        transcript.push(TurnRole::System, config.prompts.system_prompt(config.format), None);
        transcript.push(
            TurnRole::User,
            config.prompts.user_round1_text(&question, &options, Protocol::Tar),
            Some(IMAGE_ORIGINAL),
        );
        Ok(Self {
            id: id.into(),
            image,
            dims,
            question,
            options,
            ground_truth,
            config,
            state: EpisodeState::Round1Pending,
            transcript,
            annotation_override: None,
            annotated: None,
            parse_ok: Vec::new(),
            final_answer: None,
        })
    }

    /// Same as [`Episode::new`] but decodes the image from encoded bytes (PNG, ...).
    pub fn from_image_bytes(
        id: impl Into<String>,
        bytes: &[u8],
        question: impl Into<String>,
        options: Vec<ChoiceOption>,
        ground_truth: Option<String>,
        config: Arc<EpisodeConfig>,
    ) -> Result<Self, EpisodeError> {
        let image = decode_image(bytes)?;
        Self::new(id, image, question, options, ground_truth, config)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image(&self) -> &ImageHandle {
        &self.image
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn options(&self) -> &[ChoiceOption] {
        &self.options
    }

    pub fn ground_truth(&self) -> Option<&str> {
        self.ground_truth.as_deref()
    }

    pub fn format(&self) -> ActionFormat {
        self.config.format
    }

    pub fn state(&self) -> EpisodeState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_deref()
    }

    /// Annotated image produced in round 1, if any.
    pub fn annotated_image(&self) -> Option<&ImageHandle> {
        self.annotated.as_ref()
    }

    pub fn assistant_turns(&self) -> usize {
        self.parse_ok.len()
    }

    /// True when every agent turn so far parsed.
    pub fn all_turns_parsed(&self) -> bool {
        !self.parse_ok.is_empty() && self.parse_ok.iter().all(|&ok| ok)
    }

    /// Use `image` as the round-1 result instead of drawing the marks.
    pub fn override_annotation(&mut self, image: impl Into<ImageHandle>) -> Result<(), EpisodeError> {
        if self.is_done() {
            return Err(EpisodeError::Finished);
        }
        self.annotation_override = Some(image.into());
        Ok(())
    }

    pub fn step(&mut self, agent_text: &str) -> Result<EnvResponse, EpisodeError> {
        if self.is_done() {
            return Err(EpisodeError::Finished);
        }
        let round = self.parse_ok.len() + 1;
        self.transcript.push(TurnRole::Assistant, agent_text, None);
        let parsed = parse(agent_text, self.config.format);
        self.parse_ok.push(parsed.is_ok());
        let feedback = &self.config.feedback;

        let response = match parsed {
            Ok(msg) if msg.answer().is_some() => {
                let answer = msg.answer().unwrap_or_default().to_owned();
                self.state = EpisodeState::Terminated;
                self.final_answer = Some(answer.clone());
                EnvResponse {
                    updated_image: None,
                    feedback: feedback.answered.replace("{answer}", &answer),
                    done: true,
                    final_answer: Some(answer),
                    parse_ok: true,
                }
            }
            Ok(msg) if round == 1 => {
                let boxes: Vec<BoundingBox> = msg.mark_boxes().into_iter().map(|b| clamp(b, self.dims)).collect();
                let updated = match &self.annotation_override {
                    Some(img) => img.clone(),
                    None => Arc::new(apply_mark(&self.image, &boxes, &self.config.mark_style)?),
                };
                self.annotated = Some(updated.clone());
                self.state = EpisodeState::AwaitingFinal;
                EnvResponse {
                    updated_image: Some(updated),
                    feedback: feedback.marked_text(&boxes),
                    done: false,
                    final_answer: None,
                    parse_ok: true,
                }
            }
            Ok(_) => self.fail(feedback.no_answer.clone(), true),
            Err(e) if round == 1 => {
                self.state = EpisodeState::AwaitingFinal;
                EnvResponse {
                    updated_image: None,
                    feedback: feedback.parse_error.replace("{error}", &e.to_string()),
                    done: false,
                    final_answer: None,
                    parse_ok: false,
                }
            }
            Err(_) => self.fail(feedback.no_answer.clone(), false),
        };

        let image_ref = response.updated_image.as_ref().map(|_| IMAGE_ANNOTATED);
        self.transcript
            .push(TurnRole::Environment, response.feedback.clone(), image_ref);
        Ok(response)
    }

    fn fail(&mut self, feedback: String, parse_ok: bool) -> EnvResponse {
        self.state = EpisodeState::Failed(FailReason::NoAnswer);
        EnvResponse {
            updated_image: None,
            feedback,
            done: true,
            final_answer: None,
            parse_ok,
        }
    }

    /// Conversation to send to a backend for the next agent turn.
    pub fn chat_messages(&self) -> Vec<ChatMessage> {
        self.transcript
            .entries()
            .iter()
            .map(|r| match r.role {
                TurnRole::System => ChatMessage::system(r.text.clone()),
                TurnRole::Assistant => ChatMessage::assistant(r.text.clone()),
                TurnRole::User | TurnRole::Environment => {
                    let text = ContentPart::Text(r.text.clone());
                    match r.image_ref.as_deref().and_then(|name| self.image_by_ref(name)) {
                        Some(img) if r.role == TurnRole::User || self.config.round2_image_first => {
                            ChatMessage::user(vec![ContentPart::Image(img), text])
                        }
                        Some(img) => ChatMessage::user(vec![text, ContentPart::Image(img)]),
                        None => ChatMessage::user(vec![text]),
                    }
                }
            })
            .collect()
    }

    pub fn image_by_ref(&self, name: &str) -> Option<ImageHandle> {
        match name {
            IMAGE_ORIGINAL => Some(self.image.clone()),
            IMAGE_ANNOTATED => self.annotated.clone(),
            _ => None,
        }
    }

    /// Export as a training record. Image paths are supplied by the caller
    /// (original first, then the annotated image when round 1 marked).
    pub fn to_sft_record(&self, images: Vec<String>) -> SftRecord {
        let entries = self.transcript.entries();
        let user1 = entries
            .iter()
            .find(|r| r.role == TurnRole::User)
            .map(|r| r.text.clone())
            .unwrap_or_default();
        let assistants: Vec<&TurnRecord> = entries.iter().filter(|r| r.role == TurnRole::Assistant).collect();
        let envs: Vec<&TurnRecord> = entries.iter().filter(|r| r.role == TurnRole::Environment).collect();
        let round1 = SftTurn {
            user: user1,
            assistant: assistants.first().map(|r| r.text.clone()).unwrap_or_default(),
        };
        let round2 = match (assistants.get(1), envs.first()) {
            (Some(a), Some(env)) => Some(SftTurn {
                user: env.text.clone(),
                assistant: a.text.clone(),
            }),
            _ => None,
        };
        SftRecord {
            id: self.id.clone(),
            system: self.config.prompts.system_prompt(self.config.format).to_owned(),
            images,
            round1,
            round2,
        }
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, EpisodeError> {
    image::load_from_memory(bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| EpisodeError::Image(e.to_string()))
}
