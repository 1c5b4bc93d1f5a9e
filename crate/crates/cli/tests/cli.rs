use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn tarenv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tarenv"))
        .args(args)
        .current_dir(dir)
        .env_remove("TARENV_CONFIG")
        .env_remove("TARENV_ENDPOINT")
        .env_remove("TARENV_API_KEY")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn corpus(dir: &Path) {
    ok(&tarenv(
        dir,
        &["synth", "--records", "30", "--out", "syn", "--seed", "5"],
    ));
    ok(&tarenv(
        dir,
        &[
            "datagen",
            "--input",
            "syn/detections.jsonl",
            "--out",
            "samples.jsonl",
            "--benchmark",
            "syn/bench.jsonl",
        ],
    ));
}

#[test]
fn reward_of_a_perfect_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let traj = serde_json::json!({
        "trajectory": [
            r#"{"thought":"bright area","actions":[{"name":"Mark","arguments":[[1,2,30,40]]}]}"#,
            r#"{"thought":"confirmed","actions":[{"name":"Terminate","arguments":{"answer":"B"}}]}"#
        ],
        "ground_truth": "B"
    });
    fs::write(dir.path().join("t.json"), traj.to_string()).unwrap();
    let v: Value = serde_json::from_str(&ok(&tarenv(dir.path(), &["reward", "t.json"]))).unwrap();
    assert_eq!(v["total"], 1.4);
    let v: Value =
        serde_json::from_str(&ok(&tarenv(dir.path(), &["reward", "t.json", "--ground-truth", "C"]))).unwrap();
    assert_eq!(v["total"], 0.4);
}

#[test]
fn datagen_is_deterministic_and_eval_oracle_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let first = fs::read(d.join("samples.jsonl")).unwrap();
    ok(&tarenv(
        d,
        &["datagen", "--input", "syn/detections.jsonl", "--out", "again.jsonl"],
    ));
    assert_eq!(first, fs::read(d.join("again.jsonl")).unwrap());
    let report: Value = serde_json::from_slice(&fs::read(d.join("samples.jsonl.report.json")).unwrap()).unwrap();
    assert_eq!(
        report["samples"].as_u64().unwrap() as usize,
        first.iter().filter(|b| **b == b'\n').count()
    );

    for format in ["explicit", "implicit"] {
        ok(&tarenv(
            d,
            &[
                "--format",
                format,
                "eval",
                "--benchmark",
                "syn/bench.jsonl",
                "--backend",
                "oracle",
                "--out",
                "r.json",
                "--csv",
                "r.csv",
            ],
        ));
        let r: Value = serde_json::from_slice(&fs::read(d.join("r.json")).unwrap()).unwrap();
        assert_eq!(r["accuracy"], 1.0);
        assert_eq!(r["action_success_rate"], 1.0);
    }
    let table = ok(&tarenv(d, &["compare", "r.json", "r.json"]));
    assert!(table.contains("overall"));
}

#[test]
fn validate_flags_corrupted_answers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let text = fs::read_to_string(d.join("samples.jsonl")).unwrap();
    let mut flipped = 0;
    let lines: Vec<String> = text
        .lines()
        .map(|l| {
            let mut s: Value = serde_json::from_str(l).unwrap();
            if flipped < 5 && s["kind"] == "presence" {
                let answer = s["answer"].as_str().unwrap().to_owned();
                let other = s["options"].as_array().unwrap().iter().find_map(|o| {
                    let letter = o["letter"].as_str().unwrap();
                    (letter != answer).then(|| letter.to_owned())
                });
                s["answer"] = Value::String(other.unwrap());
                flipped += 1;
            }
            s.to_string()
        })
        .collect();
    assert_eq!(flipped, 5);
    fs::write(d.join("bad.jsonl"), lines.join("\n") + "\n").unwrap();

    let args = [
        "validate",
        "--samples",
        "bad.jsonl",
        "--detections",
        "syn/detections.jsonl",
        "--out",
        "v.jsonl",
    ];
    let v: Value = serde_json::from_str(&ok(&tarenv(d, &args))).unwrap();
    assert_eq!(v["invalid"], 5);
    let strict = tarenv(d, &[&args[..], &["--strict"]].concat());
    assert_eq!(strict.status.code(), Some(3));
    let verdicts = fs::read_to_string(d.join("v.jsonl")).unwrap();
    assert_eq!(verdicts.lines().count(), lines.len());
}

#[test]
fn sft_gen_writes_annotated_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    ok(&tarenv(
        d,
        &[
            "sft-gen",
            "--samples",
            "samples.jsonl",
            "--image-root",
            "syn",
            "--out",
            "sft/sft.jsonl",
        ],
    ));
    let text = fs::read_to_string(d.join("sft/sft.jsonl")).unwrap();
    let mut two_round = 0;
    for line in text.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        if let Some(marked) = r["images"].get(1) {
            assert!(d.join("sft").join(marked.as_str().unwrap()).is_file());
            assert!(r["round2"].is_object());
            two_round += 1;
        }
    }
    assert!(two_round > 0);
}

#[test]
fn usage_and_io_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = tarenv(
        d,
        &["--json", "datagen", "--input", "missing.jsonl", "--out", "x.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["exit_code"], 1);

    corpus(d);
    let out = tarenv(
        d,
        &[
            "validate",
            "--samples",
            "samples.jsonl",
            "--detections",
            "syn/detections.jsonl",
            "--mode",
            "llm",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backend"));

    fs::write(d.join("cfg.json"), r#"{"parallelism": "many"}"#).unwrap();
    let out = tarenv(d, &["--config", "cfg.json", "reward", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parallelism"));
}

#[test]
fn rollout_with_a_script() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let script = serde_json::json!(["look <bbox>[[4, 4, 40, 40]]</bbox>", "so <answer>A</answer>"]);
    fs::write(d.join("s.json"), script.to_string()).unwrap();
    let image = fs::read_dir(d.join("syn/images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let out = ok(&tarenv(
        d,
        &[
            "--format",
            "implicit",
            "rollout",
            "--image",
            image.to_str().unwrap(),
            "--question",
            "Anything?",
            "--option",
            "Yes",
            "--option",
            "No",
            "--ground-truth",
            "A",
            "--script",
            "s.json",
            "--save-annotated",
            "m.png",
        ],
    ));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["final_answer"], "A");
    assert_eq!(v["reward"]["total"], 1.4);
    assert!(d.join("m.png").is_file());
}

fn http_get(addr: &str, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(addr).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut body = String::new();
    s.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn serve_answers_health() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_tarenv"))
        .args(["serve", "--addr", &addr])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(&addr, "/v1/health") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    child.kill().unwrap();
    let stderr = BufReader::new(child.stderr.take().unwrap())
        .lines()
        .map_while(Result::ok)
        .collect::<Vec<_>>();
    child.wait().unwrap();
    let reply = reply.unwrap_or_else(|| panic!("no reply; stderr: {stderr:?}"));
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"api\":\"v1\""));
}
