//! Collector against a scripted local chat-completions server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use ccpo::collector::{Collector, CollectorConfig, Question, UncertaintyEstimator};
use ccpo::trace::{RoundRecord, Trace};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Option<String>, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let (mut len, mut auth) = (0usize, None);
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        match k.to_ascii_lowercase().as_str() {
            "content-length" => len = v.trim().parse().ok()?,
            "authorization" => auth = Some(v.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((path, auth, serde_json::from_slice(&body).ok()?))
}

fn reply(stream: &mut TcpStream, status: &str, body: &Value) {
    let text = body.to_string();
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn completion(text: &str, tokens_in: u64, tokens_out: u64, logprob: Option<f64>) -> Value {
    let mut choice = json!({"message": {"role": "assistant", "content": text}});
    if let Some(lp) = logprob {
        choice["logprobs"] = json!({"content": [{"token": "x", "logprob": lp}]});
    }
    json!({"choices": [choice], "usage": {"prompt_tokens": tokens_in, "completion_tokens": tokens_out}})
}

/// Base says "Lyon" until it has seen feedback, then "The Paris".
/// The guide rejects Lyon, accepts anything else, and fails for "unanswerable".
fn handle(path: &str, body: &Value) -> (&'static str, Value) {
    let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
    if path == "/base" {
        let rounds_seen = prompt.matches("Previous answer:").count() as u64;
        let text = if rounds_seen == 0 { "Lyon is big.\nAnswer: Lyon" } else { "Reconsidering.\nAnswer: The Paris" };
        return ("200 OK", completion(text, 100 + rounds_seen, 20, None));
    }
    if prompt.contains("unanswerable") {
        return ("500 Internal Server Error", json!({"error": "boom"}));
    }
    let answer_line = prompt.lines().find(|l| l.starts_with("A: ")).unwrap_or_default();
    if answer_line.contains("Lyon") {
        ("200 OK", completion("No [Paris]", 50, 3, Some(0.5f64.ln())))
    } else {
        ("200 OK", completion("Yes", 50, 1, Some(0.75f64.ln())))
    }
}

fn serve() -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let log = log.clone();
            std::thread::spawn(move || {
                if let Some((path, auth, body)) = read_request(&mut stream) {
                    let (status, resp) = handle(&path, &body);
                    log.lock().unwrap().push(Seen { path, auth, body });
                    reply(&mut stream, status, &resp);
                }
            });
        }
    });
    (format!("http://{addr}"), seen)
}

const KEY_VAR: &str = "CCPO_COLLECTOR_TEST_GUIDE_KEY";
const KEY: &str = "sk-test-do-not-print";

fn config(url: &str) -> CollectorConfig {
    CollectorConfig {
        base_url: format!("{url}/base"),
        base_model: "small".into(),
        base_api_key_env: None,
        guide_url: format!("{url}/guide"),
        guide_model: "large".into(),
        guide_api_key_env: Some(KEY_VAR.into()),
        timeout_secs: 10,
        retries: 1,
        retry_backoff_ms: 1,
        max_in_flight: 2,
        horizon: 2,
        uncertainty: UncertaintyEstimator::TokenLogprob,
        ..Default::default()
    }
}

fn question(id: &str, q: &str, a: &str) -> Question {
    Question {
        question_id: id.into(),
        question: q.into(),
        answer: a.into(),
    }
}

#[test]
fn scripted_endpoints_give_the_expected_traces() {
    std::env::set_var(KEY_VAR, KEY);
    let (url, seen) = serve();
    let collector = Collector::new(config(&url)).unwrap();
    assert!(!format!("{collector:?}").contains(KEY));

    let questions = vec![
        question("q1", "What is the capital of France?", "Paris"),
        question("q2", "An unanswerable question?", "42"),
        question("q3", "Where is the Louvre?", "paris!"),
    ];
    let out = collector.collect(&questions).unwrap();

    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].0, "q2");
    assert!(!out.skipped[0].1.contains(KEY));

    let r1 = RoundRecord {
        base_answer: 2,
        guide_agrees: false,
        guide_answer: 1,
        guide_uncertainty: 0.5,
        base_tokens_in: 100,
        base_tokens_out: 20,
        guide_tokens_in: 50,
        guide_tokens_out: 3,
    };
    let r2 = RoundRecord {
        base_answer: 1,
        guide_agrees: true,
        guide_answer: 1,
        guide_uncertainty: 0.25,
        base_tokens_in: 101,
        base_tokens_out: 20,
        guide_tokens_in: 50,
        guide_tokens_out: 1,
    };
    let expected = |id: &str| Trace {
        question_id: id.into(),
        true_answer: 1,
        rounds: vec![r1.clone(), r2.clone()],
        solvable_hint: None,
    };
    assert_eq!(out.traces.traces.len(), 2);
    for (got, id) in out.traces.traces.iter().zip(["q1", "q3"]) {
        let want = expected(id);
        assert_eq!(got.question_id, want.question_id);
        assert_eq!(got.true_answer, want.true_answer);
        for (g, w) in got.rounds.iter().zip(&want.rounds) {
            assert!((g.guide_uncertainty - w.guide_uncertainty).abs() < 1e-12);
            assert_eq!(RoundRecord { guide_uncertainty: 0.0, ..g.clone() }, RoundRecord { guide_uncertainty: 0.0, ..w.clone() });
        }
    }
    let header = &out.traces.header;
    assert_eq!(header.answer_vocab.as_deref(), Some(&["".to_string(), "paris".into(), "lyon".into()][..]));
    assert!(header.base_prompt_framing.as_deref().unwrap().contains("Previous answer"));

    let seen = seen.lock().unwrap().clone();
    for s in &seen {
        if s.path == "/guide" {
            assert_eq!(s.auth.as_deref(), Some(format!("Bearer {KEY}").as_str()));
            assert_eq!(s.body["temperature"], 0.0);
            assert_eq!(s.body["logprobs"], true);
            assert_eq!(s.body["model"], "large");
        } else {
            assert_eq!(s.auth, None);
            let prompt = s.body["messages"][0]["content"].as_str().unwrap();
            let want_t = if prompt.contains("Previous answer:") { 1.0 } else { 0.0 };
            assert_eq!(s.body["temperature"], want_t);
        }
    }
    // q2 fails at the guide: one base call, then the first attempt and one retry.
    let q2_guide = seen.iter().filter(|s| s.path == "/guide" && s.body.to_string().contains("unanswerable")).count();
    assert_eq!(q2_guide, 2);
}

#[test]
fn missing_key_variable_is_a_config_error() {
    let mut cfg = config("http://127.0.0.1:9");
    cfg.guide_api_key_env = Some("CCPO_COLLECTOR_TEST_UNSET_VARIABLE".into());
    let err = Collector::new(cfg).unwrap_err();
    assert!(matches!(err, ccpo::Error::Config(_)), "{err}");
}
