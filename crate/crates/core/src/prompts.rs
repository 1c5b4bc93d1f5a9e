//! Prompt text for the agent and for the data-generation helpers.
//!
//! Every string can be overridden from the prompts section of the config file;
//! the defaults below are the reference wording.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::DetectionRecord;
use crate::protocol::ActionFormat;
use crate::question::{format_options, ChoiceOption};

pub const SYSTEM_PROMPT: &str = "You are a medical image analysis assistant capable of analyzing medical images and answering questions about them. Your goal is to answer questions about medical images including modality, body part, and other medical details. You can rely on your own capabilities or use marking tools to assist in solving. Your output should be in a strict JSON format as follows:\n{\"thought\":\"the reasoning process\", \"actions\":[{\"name\":\"action\",\"arguments\":{\"argument1\":\"value1\"}}]}";

pub const SYSTEM_PROMPT_IMPLICIT: &str = "You are a medical image analysis assistant capable of analyzing medical images and answering questions about them. Your goal is to answer questions about medical images including modality, body part, and other medical details. You can rely on your own capabilities or use marking tools to assist in solving. Write your reasoning first. To mark regions of the image, append <bbox>[[x1, y1, x2, y2]]</bbox>. To give the final answer, append <answer>letter</answer>.";

pub const THINK_TAG_INSTRUCTION: &str = "Output the thinking process in <think></think> and final answer in <answer> </answer> tags. The output answer format should be as follows:\n<think> reasoning process here </think> <answer> answer here (just the letter corresponding to the option, do not provide any explanation) </answer>.\nPlease strictly follow the format.";

pub const DIRECT_INSTRUCTION: &str = "Output the final answer in <answer> </answer> tags. The output answer format should be as follows:\n<answer> answer here (just the letter corresponding to the option, do not provide any explanation) </answer>.\nPlease strictly follow the format.";

pub const VERIFICATION_TEMPLATE: &str = "You are a medical imaging question-answer (QA) pair validation expert. Your task is to verify whether the given answer is correct based on the provided image information, question, options, and the specified answer. This is a single-choice question, and the answer must be a single option (A/B/C/D/E).\n\nPlease strictly evaluate based on the following information:\n1. Image Information: {image_information}\n2. Image Resolution: {resolution}\n3. Question: {question}\n4. Options: {options}\n5. Answer to Verify: {answer}\n\nCarefully analyze the question and options, and use the image information and resolution for reasoning.\n\nYour output must be in one of the following formats:\n\nIf the answer format is incorrect (not a single A/B/C/D/E), respond with:\n\"Format error: The answer must be a single option A/B/C/D/E.\"\n\nIf the answer format is correct and the answer is correct, respond only with:\n\"Correct.\"\n\nIf the answer format is correct but the answer is wrong, respond with:\n\"Incorrect\", followed by a brief explanation.";

pub const THOUGHT_TEMPLATE: &str = "You are a medical AI assistant with visual understanding capabilities. When you receive a medical image and a related question, you will first analyze the image content, detecting key anatomical structures or abnormalities (such as fractures, masses, cells, etc.). If abnormalities relevant to the question are detected, describe what you observe and use the mark tool to annotate them; if no targets are found, explain why.\nPlease generate a structured training sample based on the following input, in JSON format as shown below:\n\n{\n    \"thought 1\": \"List initially identified abnormal features, specify the regions to be annotated with mark bbox and the reasons, and propose preliminary diagnostic hypotheses that require verification.\",\n    \"thought 2\": \"Re-examine the annotated regions in the image based on the marked areas, provide a detailed diagnostic analysis, and make a final decision.\"\n}\n\nRequirements:\n1. The thought 1 field should describe what you observe in the image (e.g., fractures, masses, soft tissue swelling, etc. No need for overly detailed descriptions at this stage, as certainty is still low). Explain the next action to be taken, such as marking these areas in the image for further confirmation.\n2. The thought 2 field should reconfirm the annotated regions, provide a diagnostic analysis, and finally state the definitive decision.\n\nInput:\nImage Information: {image_information}\nImage Resolution: {resolution}\nQuestion: {question}\nOptions: {options}\nAnswer: {answer}";

pub const GENERATION_TEMPLATE: &str = "I am constructing a visual multiple-choice question-and-answer set related to {domain}. I will provide {domain} images with a resolution of {resolution}, along with the coordinates and categories of {categories}.\n\nThe question templates are as follows:\n\n{templates}\n\nNote: The templates should be modified according to the specific image content. You need to provide the question, options, and answer, and return them in JSON format:\n[{\"Question\": \"xxx\", \"Options\": \"xxx\", \"Answer\": \"A/B/C/D/E\"}]\n\nImage information: {image_information}";

/// How the round-1 user turn instructs the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Two-round mark-then-answer loop; output format governed by the system prompt.
    #[default]
    Tar,
    /// Single turn with `<think>` and `<answer>` tags.
    Think,
    /// Single turn with only an `<answer>` tag.
    Direct,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tar => "tar",
            Protocol::Think => "think",
            Protocol::Direct => "direct",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tar" => Ok(Protocol::Tar),
            "think" | "thinktag" => Ok(Protocol::Think),
            "direct" => Ok(Protocol::Direct),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prompts {
    pub system_explicit: String,
    pub system_implicit: String,
    pub think_instruction: String,
    pub direct_instruction: String,
    pub verification: String,
    pub thought: String,
    pub generation: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            system_explicit: SYSTEM_PROMPT.to_owned(),
            system_implicit: SYSTEM_PROMPT_IMPLICIT.to_owned(),
            think_instruction: THINK_TAG_INSTRUCTION.to_owned(),
            direct_instruction: DIRECT_INSTRUCTION.to_owned(),
            verification: VERIFICATION_TEMPLATE.to_owned(),
            thought: THOUGHT_TEMPLATE.to_owned(),
            generation: GENERATION_TEMPLATE.to_owned(),
        }
    }
}

impl Prompts {
    pub fn system_prompt(&self, format: ActionFormat) -> &str {
        match format {
            ActionFormat::Explicit => &self.system_explicit,
            ActionFormat::Implicit => &self.system_implicit,
        }
    }

    /// Text of the round-1 user turn (the image part is attached separately).
    pub fn user_round1_text(&self, question: &str, options: &[ChoiceOption], protocol: Protocol) -> String {
        let body = format!("{question}\nOptions: {}", format_options(options));
        match protocol {
            Protocol::Tar => body,
            Protocol::Think => format!("{body}\n\n{}", self.think_instruction),
            Protocol::Direct => format!("{body}\n\n{}", self.direct_instruction),
        }
    }
}

/// `mass: [1, 2, 3, 4]; nodule: [5, 6, 7, 8]` or `no annotated findings`.
pub fn image_information(record: &DetectionRecord) -> String {
    if record.annotations.is_empty() {
        return "no annotated findings".to_owned();
    }
    record
        .annotations
        .iter()
        .map(|a| format!("{}: {}", a.category, a.bbox))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn resolution(record: &DetectionRecord) -> String {
    format!("{}*{}", record.width, record.height)
}

pub(crate) fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    slots
        .iter()
        .fold(template.to_owned(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::question::lettered;

    #[test]
    fn system_prompt_carries_schema() {
        let p = Prompts::default();
        assert!(p
            .system_prompt(ActionFormat::Explicit)
            .contains(r#""actions":[{"name":"action""#));
        assert_eq!(
            p.system_prompt(ActionFormat::Explicit),
            Prompts::default().system_prompt(ActionFormat::Explicit)
        );
        assert!(p.system_prompt(ActionFormat::Implicit).contains("<bbox>"));
    }

    #[test]
    fn round1_by_protocol() {
        let p = Prompts::default();
        let opts = lettered(["Yes", "No"]);
        let think = p.user_round1_text("Does the image show effusion?", &opts, Protocol::Think);
        assert!(think.starts_with("Does the image show effusion?\nOptions: A) Yes B) No"));
        assert!(think.ends_with("Please strictly follow the format."));
        let direct = p.user_round1_text("Q?", &opts, Protocol::Direct);
        assert!(direct.contains("<answer>") && !direct.contains("<think>"));
        let tar = p.user_round1_text("Q?", &opts, Protocol::Tar);
        assert_eq!(tar, "Q?\nOptions: A) Yes B) No");
    }

    #[test]
    fn overrides_replace_wholesale() {
        let p: Prompts = serde_json::from_str(r#"{"system_explicit":"custom"}"#).unwrap();
        assert_eq!(p.system_prompt(ActionFormat::Explicit), "custom");
        assert_eq!(p.think_instruction, THINK_TAG_INSTRUCTION);
    }
}
