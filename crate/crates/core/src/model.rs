//! Chat-completion backends.
//!
//! [`ModelBackend`] is the single seam between the environment and a model.
//! [`ScriptedBackend`] is a deterministic test double; [`RemoteChatBackend`]
//! speaks the common `/chat/completions` wire protocol with inline base64
//! images.

use std::collections::{HashMap, VecDeque};
use std::io::Cursor;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::protocol::{render, ActionFormat, AgentMessage};

pub type ImageHandle = Arc<RgbImage>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image(ImageHandle),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn user(parts: Vec<ContentPart>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_counts: Option<TokenCounts>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_counts: None,
        }
    }
}

/// One completion call. `episode_id` lets keyed test doubles answer per episode.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    pub episode_id: Option<&'a str>,
}

impl ChatRequest<'_> {
    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::Assistant).count()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("giving up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<BackendError> },
    #[error("script exhausted after {0} responses")]
    ScriptExhausted(usize),
    #[error("no scripted responses for episode `{0}`")]
    UnknownEpisode(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, BackendError>;

    /// Whether identical requests always produce identical completions.
    fn is_deterministic(&self) -> bool {
        false
    }

    fn name(&self) -> &str;
}

/// Ground truth the oracle replays for one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTarget {
    pub boxes: Vec<BoundingBox>,
    pub answer: String,
}

enum Script {
    Replay(Mutex<(VecDeque<String>, usize)>),
    PerEpisode(HashMap<String, Vec<String>>),
    Oracle {
        targets: HashMap<String, OracleTarget>,
        format: ActionFormat,
    },
}

/// Deterministic test double.
///
/// * `replay` hands out the given strings in order across all callers.
/// * `per_episode` keys scripts by episode id and picks the entry matching
///   the number of assistant turns already in the conversation.
/// * `oracle` marks the ground-truth boxes in round 1 and answers with the
///   ground-truth letter in round 2 (answering directly when there is no box).
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn replay<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let queue = responses.into_iter().map(Into::into).collect();
        Self {
            script: Script::Replay(Mutex::new((queue, 0))),
        }
    }

    pub fn per_episode(scripts: HashMap<String, Vec<String>>) -> Self {
        Self {
            script: Script::PerEpisode(scripts),
        }
    }

    pub fn oracle(targets: HashMap<String, OracleTarget>, format: ActionFormat) -> Self {
        Self {
            script: Script::Oracle { targets, format },
        }
    }

    /// What the oracle says at a given turn.
    pub fn oracle_turn(target: &OracleTarget, turn: usize, format: ActionFormat) -> String {
        let msg = if turn == 0 && !target.boxes.is_empty() {
            AgentMessage::mark(
                format!(
                    "Marking {} region(s) of interest for closer inspection.",
                    target.boxes.len()
                ),
                target.boxes.clone(),
            )
        } else if turn == 0 {
            AgentMessage::terminate(
                Some("Nothing in the image needs marking; answering directly.".to_owned()),
                target.answer.clone(),
            )
        } else {
            AgentMessage::terminate(
                Some("The marked evidence supports the final choice.".to_owned()),
                target.answer.clone(),
            )
        };
        render(&msg, format)
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, BackendError> {
        match &self.script {
            Script::Replay(state) => {
                let mut guard = state.lock().expect("script lock poisoned");
                let (queue, served) = &mut *guard;
                let next = queue.pop_front().ok_or(BackendError::ScriptExhausted(*served))?;
                *served += 1;
                Ok(Completion::text(next))
            }
            Script::PerEpisode(scripts) => {
                let id = request.episode_id.unwrap_or_default();
                let script = scripts
                    .get(id)
                    .ok_or_else(|| BackendError::UnknownEpisode(id.to_owned()))?;
                let turn = request.assistant_turns();
                script
                    .get(turn)
                    .map(|s| Completion::text(s.clone()))
                    .ok_or(BackendError::ScriptExhausted(script.len()))
            }
            Script::Oracle { targets, format } => {
                let id = request.episode_id.unwrap_or_default();
                let target = targets
                    .get(id)
                    .ok_or_else(|| BackendError::UnknownEpisode(id.to_owned()))?;
                Ok(Completion::text(Self::oracle_turn(
                    target,
                    request.assistant_turns(),
                    *format,
                )))
            }
        }
    }

    fn is_deterministic(&self) -> bool {
        !matches!(self.script, Script::Replay(_))
    }

    fn name(&self) -> &str {
        match self.script {
            Script::Replay(_) => "scripted",
            Script::PerEpisode(_) => "scripted-per-episode",
            Script::Oracle { .. } => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (1-based): base, 2*base, 4*base, ...
    pub fn delay(&self, n: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (n - 1).min(16)))
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.active.lock().expect("in-flight lock poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("in-flight lock poisoned");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.active.lock().expect("in-flight lock poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_max_in_flight() -> usize {
    8
}

fn default_timeout_s() -> u64 {
    120
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            model: model.into(),
            retry: RetryPolicy::default(),
            max_in_flight: default_max_in_flight(),
            timeout_s: default_timeout_s(),
        }
    }
}

pub struct RemoteChatBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        if config.endpoint.trim().is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let in_flight = InFlight::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            in_flight,
        })
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    /// Request body in the chat-completions wire schema.
    pub fn request_body(&self, request: &ChatRequest<'_>) -> Result<Value, BackendError> {
        let messages = request
            .messages
            .iter()
            .map(wire_message)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        }))
    }

    fn send_once(&self, body: &Value) -> Result<Completion, BackendError> {
        let _slot = self.in_flight.acquire();
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        parse_completion(&text)
    }
}

impl ModelBackend for RemoteChatBackend {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<Completion, BackendError> {
        let body = self.request_body(request)?;
        let attempts = self.config.retry.attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.send_once(&body) {
                Ok(c) => return Ok(c),
                Err(e) if e.retryable() && attempt < attempts => {
                    tracing::warn!(attempt, error = %e, "chat completion failed, retrying");
                    thread::sleep(self.config.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) if e.retryable() => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn name(&self) -> &str {
        &self.config.model
    }
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("encoding an in-memory RGB raster as PNG cannot fail");
    buf.into_inner()
}

pub fn png_data_url(image: &RgbImage) -> String {
    format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(encode_png(image))
    )
}

fn wire_message(m: &ChatMessage) -> Result<Value, BackendError> {
    let only_text = m.parts.iter().all(|p| matches!(p, ContentPart::Text(_)));
    let content = if only_text {
        Value::String(m.text())
    } else {
        Value::Array(
            m.parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => json!({"type": "text", "text": t}),
                    ContentPart::Image(img) => {
                        json!({"type": "image_url", "image_url": {"url": png_data_url(img)}})
                    }
                })
                .collect(),
        )
    };
    if m.role == Role::System && !only_text {
        return Err(BackendError::Config("system messages must be text only".into()));
    }
    Ok(json!({"role": m.role.as_str(), "content": content}))
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub fn parse_completion(body: &str) -> Result<Completion, BackendError> {
    let resp: WireResponse = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let text = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Malformed("response has no message content".into()))?;
    Ok(Completion {
        text,
        token_counts: resp.usage.map(|u| TokenCounts {
            prompt: u.prompt_tokens,
            completion: u.completion_tokens,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse;

    fn req<'a>(msgs: &'a [ChatMessage], params: &'a GenerationParams, id: Option<&'a str>) -> ChatRequest<'a> {
        ChatRequest {
            messages: msgs,
            params,
            episode_id: id,
        }
    }

    #[test]
    fn replay_in_order_then_exhausts() {
        let b = ScriptedBackend::replay(["one", "two"]);
        let p = GenerationParams::default();
        let r = req(&[], &p, None);
        assert_eq!(b.complete(&r).unwrap().text, "one");
        assert_eq!(b.complete(&r).unwrap().text, "two");
        assert_eq!(b.complete(&r), Err(BackendError::ScriptExhausted(2)));
    }

    #[test]
    fn oracle_marks_then_answers() {
        let gt = BoundingBox::from([213, 175, 239, 211]);
        let targets = HashMap::from([(
            "s1".to_owned(),
            OracleTarget {
                boxes: vec![gt],
                answer: "B".into(),
            },
        )]);
        let b = ScriptedBackend::oracle(targets, ActionFormat::Explicit);
        let p = GenerationParams::default();
        let mut msgs = vec![
            ChatMessage::system("s"),
            ChatMessage::user(vec![ContentPart::Text("q".into())]),
        ];
        let first = b.complete(&req(&msgs, &p, Some("s1"))).unwrap().text;
        let m = parse(&first, ActionFormat::Explicit).unwrap();
        assert_eq!(m.mark_boxes(), vec![gt]);
        msgs.push(ChatMessage::assistant(first));
        let second = b.complete(&req(&msgs, &p, Some("s1"))).unwrap().text;
        assert_eq!(parse(&second, ActionFormat::Explicit).unwrap().answer(), Some("B"));
        assert!(matches!(
            b.complete(&req(&msgs, &p, Some("nope"))),
            Err(BackendError::UnknownEpisode(_))
        ));
    }

    #[test]
    fn oracle_without_box_answers_immediately() {
        let t = OracleTarget {
            boxes: vec![],
            answer: "A".into(),
        };
        let text = ScriptedBackend::oracle_turn(&t, 0, ActionFormat::Implicit);
        assert!(text.ends_with("<answer>A</answer>"));
    }

    #[test]
    fn completion_parsing() {
        let c = parse_completion(
            r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":5,"completion_tokens":2,"total_tokens":7}}"#,
        )
        .unwrap();
        assert_eq!(c.text, "hi");
        assert_eq!(
            c.token_counts,
            Some(TokenCounts {
                prompt: 5,
                completion: 2
            })
        );
        let c = parse_completion(r#"{"choices":[{"message":{"content":"x"}}]}"#).unwrap();
        assert_eq!(c.token_counts, None);
        assert!(matches!(parse_completion("{}"), Err(BackendError::Malformed(_))));
        assert!(matches!(
            parse_completion(r#"{"choices":[]}"#),
            Err(BackendError::Malformed(_))
        ));
    }

    #[test]
    fn wire_body_inlines_images() {
        let backend = RemoteChatBackend::new(RemoteConfig::new("http://localhost:1/v1/", None, "m")).unwrap();
        assert_eq!(backend.url(), "http://localhost:1/v1/chat/completions");
        let img = Arc::new(RgbImage::new(2, 2));
        let msgs = vec![
            ChatMessage::system("sys"),
            ChatMessage::user(vec![ContentPart::Image(img), ContentPart::Text("q".into())]),
        ];
        let p = GenerationParams::default();
        let body = backend.request_body(&req(&msgs, &p, None)).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["messages"][0]["content"], "sys");
        let url = body["messages"][1]["content"][0]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(body["messages"][1]["content"][1]["text"], "q");
    }

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy {
            attempts: 3,
            base_delay_ms: 10,
        };
        assert_eq!(r.delay(1), Duration::from_millis(10));
        assert_eq!(r.delay(2), Duration::from_millis(20));
        assert_eq!(r.delay(3), Duration::from_millis(40));
    }
}
