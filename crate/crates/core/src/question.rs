//! Multiple-choice option lists.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OptionsError {
    #[error("at least one option is required")]
    Empty,
    #[error("option letter `{0}` is outside A-E")]
    BadLetter(char),
    #[error("option letter `{0}` appears more than once")]
    Duplicate(char),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub letter: char,
    pub text: String,
}

impl ChoiceOption {
    pub fn new(letter: char, text: impl Into<String>) -> Self {
        Self {
            letter,
            text: text.into(),
        }
    }
}

/// Letters `A`, `B`, ... assigned in order.
pub fn lettered<I, S>(texts: I) -> Vec<ChoiceOption>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    texts
        .into_iter()
        .zip('A'..)
        .map(|(t, l)| ChoiceOption::new(l, t))
        .collect()
}

pub fn validate_options(options: &[ChoiceOption]) -> Result<(), OptionsError> {
    if options.is_empty() {
        return Err(OptionsError::Empty);
    }
    let mut seen = HashSet::new();
    for o in options {
        if !('A'..='E').contains(&o.letter) {
            return Err(OptionsError::BadLetter(o.letter));
        }
        if !seen.insert(o.letter) {
            return Err(OptionsError::Duplicate(o.letter));
        }
    }
    Ok(())
}

/// `A) Yes B) No`
pub fn format_options(options: &[ChoiceOption]) -> String {
    options
        .iter()
        .map(|o| format!("{}) {}", o.letter, o.text))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trim, drop trailing punctuation, uppercase; `Some` only for a single letter A-E.
pub fn normalize_letter(s: &str) -> Option<char> {
    let t = s.trim().trim_end_matches(|c: char| c.is_ascii_punctuation()).trim();
    let mut chars = t.chars();
    let c = chars.next()?.to_ascii_uppercase();
    (chars.next().is_none() && ('A'..='E').contains(&c)).then_some(c)
}
