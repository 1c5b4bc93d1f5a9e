//! Agent message wire formats.
//!
//! Two encodings are supported:
//!
//! * **Explicit**: a JSON object
//!   `{"thought": "...", "actions": [{"name": "Mark", "arguments": [[x1,y1,x2,y2]]}]}`.
//!   `Mark` arguments may also be given as `{"box": [[...]]}`; `Terminate`
//!   takes `{"answer": "A"}`. Prose and code fences around the object are
//!   ignored; the first well-formed object wins.
//! * **Implicit**: tags embedded in free text: `<bbox>[[x1,y1,x2,y2]]</bbox>`
//!   marks regions and `<answer>A</answer>` terminates. Text outside the tags
//!   is the thought.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in output")]
    NoJsonFound,
    #[error("no action tag found in output")]
    NoTagFound,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("bad coordinates: {0}")]
    BadCoordinates(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionFormat {
    #[default]
    Explicit,
    Implicit,
}

impl fmt::Display for ActionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionFormat::Explicit => "explicit",
            ActionFormat::Implicit => "implicit",
        })
    }
}

impl std::str::FromStr for ActionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "explicit" => Ok(ActionFormat::Explicit),
            "implicit" => Ok(ActionFormat::Implicit),
            other => Err(format!("unknown action format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "PascalCase")]
pub enum Action {
    Mark { boxes: Vec<BoundingBox> },
    Terminate { answer: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub thought: Option<String>,
    pub actions: Vec<Action>,
    /// Exact model output the message was parsed from (empty when built in code).
    #[serde(default)]
    pub raw: String,
}

impl AgentMessage {
    pub fn new(thought: Option<String>, actions: Vec<Action>) -> Self {
        Self {
            thought,
            actions,
            raw: String::new(),
        }
    }

    pub fn mark(thought: impl Into<String>, boxes: Vec<BoundingBox>) -> Self {
        Self::new(Some(thought.into()), vec![Action::Mark { boxes }])
    }

    pub fn terminate(thought: Option<String>, answer: impl Into<String>) -> Self {
        Self::new(thought, vec![Action::Terminate { answer: answer.into() }])
    }

    pub fn has_mark(&self) -> bool {
        self.actions.iter().any(|a| matches!(a, Action::Mark { .. }))
    }

    /// Answer of the first `Terminate` action in textual order.
    pub fn answer(&self) -> Option<&str> {
        self.actions.iter().find_map(|a| match a {
            Action::Terminate { answer } => Some(answer.as_str()),
            Action::Mark { .. } => None,
        })
    }

    /// All boxes across every `Mark` action, in order.
    pub fn mark_boxes(&self) -> Vec<BoundingBox> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Mark { boxes } => Some(boxes.iter().copied()),
                Action::Terminate { .. } => None,
            })
            .flatten()
            .collect()
    }

    /// Non-empty thought, if any.
    pub fn thought_text(&self) -> Option<&str> {
        self.thought.as_deref().filter(|t| !t.trim().is_empty())
    }

    /// Equality on thought (whitespace-insensitive) and actions; ignores `raw`.
    pub fn same_content(&self, other: &AgentMessage) -> bool {
        let norm = |t: &Option<String>| t.as_deref().map(collapse_ws).filter(|s| !s.is_empty());
        norm(&self.thought) == norm(&other.thought) && self.actions == other.actions
    }
}

pub fn parse(text: &str, format: ActionFormat) -> Result<AgentMessage, ParseError> {
    match format {
        ActionFormat::Explicit => parse_explicit(text),
        ActionFormat::Implicit => parse_implicit(text),
    }
}

pub fn parse_explicit(text: &str) -> Result<AgentMessage, ParseError> {
    let obj = first_json_object(text).ok_or(ParseError::NoJsonFound)?;

    let thought = match obj.get("thought") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(schema("`thought` must be a string")),
    };

    let actions = match obj.get("actions") {
        Some(Value::Array(items)) if !items.is_empty() => items,
        Some(Value::Array(_)) => return Err(schema("`actions` is empty")),
        Some(_) => return Err(schema("`actions` must be an array")),
        None => return Err(schema("missing `actions`")),
    };

    let actions = actions
        .iter()
        .enumerate()
        .map(|(i, a)| explicit_action(i, a))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(AgentMessage {
        thought,
        actions,
        raw: text.to_owned(),
    })
}

fn explicit_action(index: usize, value: &Value) -> Result<Action, ParseError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema(format!("actions[{index}] is not an object")))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| schema(format!("actions[{index}] has no string `name`")))?;
    let args = obj.get("arguments");
    match name {
        "Mark" => {
            let list = match args {
                Some(Value::Array(_)) => args.unwrap(),
                Some(Value::Object(m)) => m
                    .get("box")
                    .ok_or_else(|| schema(format!("actions[{index}] Mark arguments lack `box`")))?,
                _ => return Err(schema(format!("actions[{index}] Mark needs a box list"))),
            };
            Ok(Action::Mark { boxes: box_list(list)? })
        }
        "Terminate" => {
            let answer = args
                .and_then(Value::as_object)
                .and_then(|m| m.get("answer"))
                .and_then(Value::as_str)
                .ok_or_else(|| schema(format!("actions[{index}] Terminate needs a string `answer`")))?
                .trim();
            if answer.is_empty() {
                return Err(schema(format!("actions[{index}] Terminate answer is empty")));
            }
            Ok(Action::Terminate {
                answer: answer.to_owned(),
            })
        }
        other => Err(schema(format!("actions[{index}] has unknown name `{other}`"))),
    }
}

/// First `{` at which a complete JSON object can be decoded.
fn first_json_object(text: &str) -> Option<Map<String, Value>> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(m))) => Some(m),
            _ => None,
        }
    })
}

fn box_list(value: &Value) -> Result<Vec<BoundingBox>, ParseError> {
    let items = value
        .as_array()
        .ok_or_else(|| bad("expected a list of [x1, y1, x2, y2] quadruples"))?;
    if items.is_empty() {
        return Err(bad("box list is empty"));
    }
    items.iter().map(quadruple).collect()
}

fn quadruple(value: &Value) -> Result<BoundingBox, ParseError> {
    let nums = value
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| bad(format!("`{value}` is not a quadruple")))?;
    let mut c = [0i64; 4];
    for (slot, n) in c.iter_mut().zip(nums) {
        let f = n
            .as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| bad(format!("`{n}` is not a number")))?;
        if !(0.0..1e12).contains(&f) {
            return Err(bad(format!("coordinate {f} out of range")));
        }
        *slot = f.floor() as i64;
    }
    BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))
}

const BBOX_OPEN: &str = "<bbox>";
const BBOX_CLOSE: &str = "</bbox>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

pub fn parse_implicit(text: &str) -> Result<AgentMessage, ParseError> {
    let mut actions = Vec::new();
    let mut outside = String::new();
    let mut rest = text;

    loop {
        let next = [(BBOX_OPEN, BBOX_CLOSE), (ANSWER_OPEN, ANSWER_CLOSE)]
            .into_iter()
            .filter_map(|(open, close)| {
                let start = rest.find(open)?;
                let body_start = start + open.len();
                let len = rest[body_start..].find(close)?;
                Some((start, body_start, body_start + len, open, close))
            })
            .min_by_key(|t| t.0);
        let Some((start, body_start, body_end, open, close)) = next else {
            outside.push_str(rest);
            break;
        };
        outside.push_str(&rest[..start]);
        outside.push(' ');
        let body = &rest[body_start..body_end];
        if open == BBOX_OPEN {
            let value: Value = serde_json::from_str(body.trim())
                .map_err(|_| bad(format!("`{}` is not a coordinate list", body.trim())))?;
            actions.push(Action::Mark {
                boxes: box_list(&value)?,
            });
        } else {
            let answer = body.trim();
            if answer.is_empty() {
                return Err(schema("answer tag is empty"));
            }
            actions.push(Action::Terminate {
                answer: answer.to_owned(),
            });
        }
        rest = &rest[body_end + close.len()..];
    }

    if actions.is_empty() {
        return Err(ParseError::NoTagFound);
    }
    let thought = collapse_ws(&outside.replace("<think>", " ").replace("</think>", " "));
    Ok(AgentMessage {
        thought: (!thought.is_empty()).then_some(thought),
        actions,
        raw: text.to_owned(),
    })
}

/// Trimmed content of the last `<answer>...</answer>` pair.
pub fn extract_tag_answer(text: &str) -> Result<String, ParseError> {
    let mut found = None;
    let mut rest = text;
    while let Some(start) = rest.find(ANSWER_OPEN) {
        let body = &rest[start + ANSWER_OPEN.len()..];
        match body.find(ANSWER_CLOSE) {
            Some(end) => {
                found = Some(body[..end].trim().to_owned());
                rest = &body[end + ANSWER_CLOSE.len()..];
            }
            None => break,
        }
    }
    match found {
        Some(a) if a.is_empty() => Err(schema("answer tag is empty")),
        Some(a) => Ok(a),
        None => Err(ParseError::NoTagFound),
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    thought: Option<&'a str>,
    actions: Vec<WireAction<'a>>,
}

#[derive(Serialize)]
struct WireAction<'a> {
    name: &'a str,
    arguments: Value,
}

pub fn render(message: &AgentMessage, format: ActionFormat) -> String {
    match format {
        ActionFormat::Explicit => render_explicit(message),
        ActionFormat::Implicit => render_implicit(message),
    }
}

fn render_explicit(message: &AgentMessage) -> String {
    let wire = WireMessage {
        thought: message.thought.as_deref(),
        actions: message
            .actions
            .iter()
            .map(|a| match a {
                Action::Mark { boxes } => WireAction {
                    name: "Mark",
                    arguments: json!(boxes),
                },
                Action::Terminate { answer } => WireAction {
                    name: "Terminate",
                    arguments: json!({ "answer": answer }),
                },
            })
            .collect(),
    };
    serde_json::to_string(&wire).expect("wire message is always serializable")
}

fn render_implicit(message: &AgentMessage) -> String {
    let mut parts: Vec<String> = Vec::new();
    if let Some(t) = message.thought_text() {
        parts.push(t.to_owned());
    }
    for a in &message.actions {
        parts.push(match a {
            Action::Mark { boxes } => {
                let coords = serde_json::to_string(boxes).expect("boxes serialize");
                format!("{BBOX_OPEN}{coords}{BBOX_CLOSE}")
            }
            Action::Terminate { answer } => format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"),
        });
    }
    parts.join(" ")
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn schema(msg: impl Into<String>) -> ParseError {
    ParseError::SchemaViolation(msg.into())
}

fn bad(msg: impl Into<String>) -> ParseError {
    ParseError::BadCoordinates(msg.into())
}
