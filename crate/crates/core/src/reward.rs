//! Rule-based rewards for two-round trajectories.
//!
//! `R = R_format + R_acc`, where the format part is 0.2 for a parseable
//! thought+action first round plus 0.2 for a well-formed final answer, and the
//! accuracy part is 1.0 for an exact letter match. All parsing goes through
//! [`crate::protocol`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::Transcript;
use crate::protocol::{parse, ActionFormat};
use crate::question::normalize_letter;

pub const FORMAT_REWARD: f64 = 0.2;
pub const ACCURACY_REWARD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("trajectory has no assistant turns")]
    Empty,
    #[error("trajectory has {0} assistant turns; at most 2 are allowed")]
    TooManyTurns(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_round1: f64,
    pub format_final: f64,
    pub accuracy: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn from_flags(round1: bool, final_ok: bool, correct: bool) -> Self {
        // summed in tenths so the total is the nearest double to the exact value
        let tenths = 2 * u32::from(round1) + 2 * u32::from(final_ok) + 10 * u32::from(correct);
        Self {
            format_round1: if round1 { FORMAT_REWARD } else { 0.0 },
            format_final: if final_ok { FORMAT_REWARD } else { 0.0 },
            accuracy: if correct { ACCURACY_REWARD } else { 0.0 },
            total: f64::from(tenths) / 10.0,
        }
    }

    pub fn zero() -> Self {
        Self::from_flags(false, false, false)
    }

    pub fn is_correct(&self) -> bool {
        self.accuracy == ACCURACY_REWARD
    }
}

/// 0.2 when the turn parses with at least one action and, for the explicit
/// format, a non-empty thought.
pub fn score_round1_format(text: &str, format: ActionFormat) -> f64 {
    let ok = match parse(text, format) {
        Ok(m) => !m.actions.is_empty() && (format == ActionFormat::Implicit || m.thought_text().is_some()),
        Err(_) => false,
    };
    if ok {
        FORMAT_REWARD
    } else {
        0.0
    }
}

/// 0.2 when the turn carries a non-empty answer and no Mark action.
pub fn score_final_format(text: &str, format: ActionFormat) -> f64 {
    match parse(text, format) {
        Ok(m) if m.answer().is_some() && !m.has_mark() => FORMAT_REWARD,
        _ => 0.0,
    }
}

/// 1.0 iff both sides normalize to the same single letter A-E.
pub fn score_accuracy(predicted: &str, ground_truth: &str) -> f64 {
    match (normalize_letter(predicted), normalize_letter(ground_truth)) {
        (Some(p), Some(g)) if p == g => ACCURACY_REWARD,
        _ => 0.0,
    }
}

/// Answer the final turn would be graded on, if it parses to one.
pub fn final_answer(text: &str, format: ActionFormat) -> Option<String> {
    parse(text, format).ok()?.answer().map(str::to_owned)
}

/// Scores the assistant turns of a trajectory.
///
/// Two turns: round-1 format on the first, final format and accuracy on the
/// second. One turn (answered directly): the single turn is scored for both
/// format components, so a thought plus a well-formed Terminate earns both.
pub fn score_turns<S: AsRef<str>>(
    turns: &[S],
    ground_truth: &str,
    format: ActionFormat,
) -> Result<RewardBreakdown, RewardError> {
    let (round1, last) = match turns {
        [] => return Err(RewardError::Empty),
        [only] => (score_round1_format(only.as_ref(), format) > 0.0, only.as_ref()),
        [first, last] => (score_round1_format(first.as_ref(), format) > 0.0, last.as_ref()),
        more => return Err(RewardError::TooManyTurns(more.len())),
    };
    let final_ok = score_final_format(last, format) > 0.0;
    let correct = final_answer(last, format).is_some_and(|a| score_accuracy(&a, ground_truth) > 0.0);
    Ok(RewardBreakdown::from_flags(round1, final_ok, correct))
}

pub fn score_trajectory(
    transcript: &Transcript,
    ground_truth: &str,
    format: ActionFormat,
) -> Result<RewardBreakdown, RewardError> {
    score_turns(&transcript.assistant_texts(), ground_truth, format)
}

/// A trajectory as submitted for scoring: a full transcript, or just the
/// assistant texts in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Trajectory {
    Turns(Vec<String>),
    Transcript(Transcript),
}

impl Trajectory {
    pub fn assistant_texts(&self) -> Vec<&str> {
        match self {
            Trajectory::Turns(t) => t.iter().map(String::as_str).collect(),
            Trajectory::Transcript(t) => t.assistant_texts(),
        }
    }
}

/// Body of a scoring request, shared by the CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRequest {
    pub trajectory: Trajectory,
    pub ground_truth: String,
    #[serde(default)]
    pub format: ActionFormat,
}

impl RewardRequest {
    pub fn score(&self) -> Result<RewardBreakdown, RewardError> {
        score_turns(&self.trajectory.assistant_texts(), &self.ground_truth, self.format)
    }
}
