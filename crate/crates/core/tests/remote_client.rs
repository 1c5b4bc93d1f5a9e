use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use serde_json::Value;
use tarenv_core::model::{
    BackendError, ChatMessage, ChatRequest, ContentPart, GenerationParams, ModelBackend, RemoteChatBackend,
    RemoteConfig, RetryPolicy,
};

struct Captured {
    headers: Vec<String>,
    body: Value,
}

/// Minimal HTTP/1.1 server answering every request with `respond(n)` where
/// `n` counts requests from zero.
struct Fixture {
    url: String,
    hits: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    captured: Arc<Mutex<Vec<Captured>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Captured> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut headers = Vec::new();
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end().to_owned();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().ok()?;
        }
        headers.push(line);
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Captured {
        headers,
        body: serde_json::from_slice(&body).ok()?,
    })
}

impl Fixture {
    fn start<F>(delay: Duration, respond: F) -> Self
    where
        F: Fn(usize) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let captured = Arc::new(Mutex::new(Vec::new()));
        let respond = Arc::new(respond);
        let (h, p, c) = (hits.clone(), peak.clone(), captured.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let (h, a, p, c, respond) = (h.clone(), active.clone(), p.clone(), c.clone(), respond.clone());
                thread::spawn(move || {
                    let Some(req) = read_request(&mut stream) else { return };
                    let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    let n = h.fetch_add(1, Ordering::SeqCst);
                    c.lock().unwrap().push(req);
                    thread::sleep(delay);
                    let (status, body) = respond(n);
                    a.fetch_sub(1, Ordering::SeqCst);
                    let reply = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(reply.as_bytes());
                });
            }
        });
        Self {
            url,
            hits,
            peak,
            captured,
        }
    }
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 5}
    })
    .to_string()
}

fn backend(url: &str, key: Option<&str>) -> RemoteChatBackend {
    let mut cfg = RemoteConfig::new(url, key.map(str::to_owned), "test-model");
    cfg.retry = RetryPolicy {
        attempts: 3,
        base_delay_ms: 5,
    };
    RemoteChatBackend::new(cfg).unwrap()
}

fn messages() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("sys"),
        ChatMessage::user(vec![
            ContentPart::Image(Arc::new(RgbImage::new(4, 3))),
            ContentPart::Text("question".into()),
        ]),
    ]
}

#[test]
fn fixed_completion_with_usage() {
    let fx = Fixture::start(Duration::ZERO, |_| (200, ok_body("<answer>A</answer>")));
    let b = backend(&fx.url, Some("sekret"));
    let msgs = messages();
    let params = GenerationParams::default();
    let c = b
        .complete(&ChatRequest {
            messages: &msgs,
            params: &params,
            episode_id: None,
        })
        .unwrap();
    assert_eq!(c.text, "<answer>A</answer>");
    let usage = c.token_counts.unwrap();
    assert_eq!((usage.prompt, usage.completion), (11, 5));

    let cap = fx.captured.lock().unwrap();
    let req = &cap[0];
    assert!(req
        .headers
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sekret")));
    assert!(req.headers[0].starts_with("POST /v1/chat/completions"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["messages"][0]["content"], "sys");
    let parts = req.body["messages"][1]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "image_url");
    assert!(parts[0]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert_eq!(parts[1], serde_json::json!({"type": "text", "text": "question"}));
    assert_eq!(req.body["temperature"], 0.1);
}

#[test]
fn server_errors_exhaust_retries() {
    let fx = Fixture::start(Duration::ZERO, |_| (500, "{}".into()));
    let b = backend(&fx.url, None);
    let msgs = messages();
    let params = GenerationParams::default();
    let err = b
        .complete(&ChatRequest {
            messages: &msgs,
            params: &params,
            episode_id: None,
        })
        .unwrap_err();
    match err {
        BackendError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, BackendError::Status { status: 500, .. }));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(fx.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn transient_failure_then_success() {
    let fx = Fixture::start(Duration::ZERO, |n| {
        if n == 0 {
            (429, "{}".into())
        } else {
            (200, ok_body("ok"))
        }
    });
    let b = backend(&fx.url, None);
    let msgs = messages();
    let params = GenerationParams::default();
    let c = b
        .complete(&ChatRequest {
            messages: &msgs,
            params: &params,
            episode_id: None,
        })
        .unwrap();
    assert_eq!(c.text, "ok");
    assert_eq!(fx.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let fx = Fixture::start(Duration::ZERO, |_| (400, r#"{"error":"bad"}"#.into()));
    let b = backend(&fx.url, None);
    let msgs = messages();
    let params = GenerationParams::default();
    let err = b
        .complete(&ChatRequest {
            messages: &msgs,
            params: &params,
            episode_id: None,
        })
        .unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }));
    assert_eq!(fx.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body_is_reported() {
    let fx = Fixture::start(Duration::ZERO, |_| (200, r#"{"choices":[]}"#.into()));
    let b = backend(&fx.url, None);
    let msgs = messages();
    let params = GenerationParams::default();
    let err = b
        .complete(&ChatRequest {
            messages: &msgs,
            params: &params,
            episode_id: None,
        })
        .unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)));
}

#[test]
fn in_flight_limit_is_respected() {
    let fx = Fixture::start(Duration::from_millis(60), |_| (200, ok_body("ok")));
    let mut cfg = RemoteConfig::new(&fx.url, None, "m");
    cfg.max_in_flight = 2;
    let b = Arc::new(RemoteChatBackend::new(cfg).unwrap());
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let b = b.clone();
            thread::spawn(move || {
                let msgs = [ChatMessage::user(vec![ContentPart::Text("q".into())])];
                let params = GenerationParams::default();
                b.complete(&ChatRequest {
                    messages: &msgs,
                    params: &params,
                    episode_id: None,
                })
                .unwrap()
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(fx.hits.load(Ordering::SeqCst), 6);
    assert!(fx.peak.load(Ordering::SeqCst) <= 2);
    let cap = fx.captured.lock().unwrap();
    assert_eq!(cap[0].body["messages"][0]["content"], "q");
}
