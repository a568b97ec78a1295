//! Builds replay corpora by calling a base and a guide chat-completion endpoint.
//!
//! Every round asks the base model for an answer (greedy at round 1, sampled
//! afterwards) and then asks the guide to judge it. Free-text answers are
//! normalized and mapped to vocabulary ids; id 0 is reserved for answers that
//! normalize to nothing.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{validate_trace, AnswerId, RoundRecord, Trace, TraceHeader, TraceSet};

/// Guide prompt; `{question}` and `{answer}` are substituted.
pub const GUIDE_TEMPLATE: &str = "Evaluate the answer.\n- If correct, reply \"Yes\".\n- If incorrect, reply \"No [correct answer]\" (only the correct answer, nothing else).\nQ: {question}\nA: {answer}\nYour response:";

/// Base prompt; earlier attempts and guide replies are appended per round.
pub const BASE_FRAMING: &str = "Answer the question. Think step by step, then give your final answer on the last line in the form \"Answer: <answer>\".\nQ: {question}\n{history}";

/// Line appended to `{history}` for each earlier round.
pub const BASE_HISTORY_LINE: &str = "Previous answer: {answer}\nReviewer feedback: {feedback}\n";

pub const ESCAPE_ANSWER: &str = "";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyEstimator {
    /// `1 - p` of the guide's first reply token when log-probabilities come back,
    /// otherwise the agreement heuristic.
    #[default]
    TokenLogprob,
    /// 0.2 when the guide agrees, 0.8 when it does not.
    Agreement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    pub base_url: String,
    pub base_model: String,
    /// Name of the environment variable holding the base endpoint's key; unset means no auth header.
    pub base_api_key_env: Option<String>,
    pub guide_url: String,
    pub guide_model: String,
    pub guide_api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Extra attempts per request after the first failure.
    pub retries: u32,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub questions: PathBuf,
    pub horizon: usize,
    pub uncertainty: UncertaintyEstimator,
    pub max_tokens: u32,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1/chat/completions".into(),
            base_model: "base".into(),
            base_api_key_env: None,
            guide_url: "https://api.openai.com/v1/chat/completions".into(),
            guide_model: "gpt-4o".into(),
            guide_api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 60,
            retries: 3,
            retry_backoff_ms: 1000,
            max_in_flight: 4,
            questions: PathBuf::from("questions.jsonl"),
            horizon: 4,
            uncertainty: UncertaintyEstimator::TokenLogprob,
            max_tokens: 512,
        }
    }
}

impl CollectorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: CollectorConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.questions.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.questions = dir.join(&cfg.questions);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, url) in [("base_url", &self.base_url), ("guide_url", &self.guide_url)] {
            let rest = url
                .strip_prefix("http://")
                .or_else(|| url.strip_prefix("https://"))
                .ok_or_else(|| Error::validation(field, format!("`{url}` is not an http(s) URL")))?;
            if rest.is_empty() || rest.starts_with('/') {
                return Err(Error::validation(field, format!("`{url}` has no host")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::validation("max_in_flight", "must be at least 1"));
        }
        if self.timeout_secs == 0 {
            return Err(Error::validation("timeout_secs", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub question: String,
    pub answer: String,
}

pub fn read_questions(path: &Path) -> Result<Vec<Question>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Judgment parsed from a guide reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Judgment {
    Agree,
    Correct(String),
}

pub fn parse_judgment(reply: &str) -> Result<Judgment> {
    let text = reply.trim();
    let lower = text.to_lowercase();
    let word_end = |s: &str| s.chars().next().is_none_or(|c| !c.is_alphanumeric());
    if lower.starts_with("yes") && word_end(&lower[3..]) {
        return Ok(Judgment::Agree);
    }
    if lower.starts_with("no") && word_end(&lower[2..]) {
        let rest = text[2..].trim_start_matches(|c: char| c.is_whitespace() || matches!(c, ',' | ':' | '.' | '-'));
        let rest = rest.trim().trim_start_matches('[').trim_end_matches(']').trim();
        if rest.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "guide said No without a corrected answer".into(),
            });
        }
        return Ok(Judgment::Correct(rest.to_string()));
    }
    Err(Error::Parse {
        line: 0,
        message: "guide reply is neither Yes nor No".into(),
    })
}

/// Text after the last `Answer:` marker, or the last non-empty line.
pub fn extract_base_answer(reply: &str) -> String {
    if let Some(pos) = reply.to_lowercase().rfind("answer:") {
        return reply[pos + "answer:".len()..].lines().next().unwrap_or("").trim().to_string();
    }
    reply.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

pub fn guide_prompt(question: &str, answer: &str) -> String {
    GUIDE_TEMPLATE.replace("{question}", question).replace("{answer}", answer)
}

pub fn base_prompt(question: &str, history: &[(String, String)]) -> String {
    let hist: String = history
        .iter()
        .map(|(a, f)| BASE_HISTORY_LINE.replace("{answer}", a).replace("{feedback}", f))
        .collect();
    BASE_FRAMING.replace("{question}", question).replace("{history}", &hist)
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    logprobs: bool,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// One completed chat call.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Log-probability of the first generated token, when reported.
    pub first_logprob: Option<f64>,
}

struct Endpoint<'a> {
    url: &'a str,
    model: &'a str,
    key: Option<String>,
}

fn api_key(var: &Option<String>) -> Result<Option<String>> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| Error::Config(format!("environment variable `{name}` is not set"))),
    }
}

pub struct Collector {
    config: CollectorConfig,
    agent: ureq::Agent,
    base_key: Option<String>,
    guide_key: Option<String>,
}

impl std::fmt::Debug for Collector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Keys are deliberately left out.
        f.debug_struct("Collector").field("config", &self.config).finish_non_exhaustive()
    }
}

/// Raw text of one collected round before vocabulary mapping.
#[derive(Clone, Debug, PartialEq)]
struct RawRound {
    base: String,
    agrees: bool,
    guide: String,
    uncertainty: f64,
    base_in: u64,
    base_out: u64,
    guide_in: u64,
    guide_out: u64,
}

/// Outcome of a collection pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Collection {
    pub traces: TraceSet,
    /// `(question_id, reason)` for every skipped question.
    pub skipped: Vec<(String, String)>,
}

impl Collector {
    pub fn new(config: CollectorConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            base_key: api_key(&config.base_api_key_env)?,
            guide_key: api_key(&config.guide_api_key_env)?,
            config,
            agent,
        })
    }

    fn call_once(&self, ep: &Endpoint<'_>, req: &ChatRequest<'_>) -> Result<Completion> {
        let mut builder = self.agent.post(ep.url);
        if let Some(k) = &ep.key {
            builder = builder.header("Authorization", format!("Bearer {k}"));
        }
        let resp: ChatResponse = builder
            .send_json(req)
            .and_then(|r| r.into_body().read_json())
            .map_err(|e| Error::Http(e.to_string()))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Http("response has no choices".into()))?;
        let usage = resp.usage.unwrap_or_default();
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            tokens_in: usage.prompt_tokens,
            tokens_out: usage.completion_tokens,
            first_logprob: choice
                .logprobs
                .and_then(|l| l.content)
                .and_then(|c| c.first().map(|t| t.logprob)),
        })
    }

    fn call(&self, ep: &Endpoint<'_>, prompt: &str, temperature: f64, logprobs: bool) -> Result<Completion> {
        let req = ChatRequest {
            model: ep.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature,
            max_tokens: self.config.max_tokens,
            logprobs,
        };
        let mut last = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff_ms << (attempt - 1).min(6)));
            }
            match self.call_once(ep, &req) {
                Ok(c) => return Ok(c),
                Err(e) => {
                    log::debug!("request to {} failed (attempt {}): {e}", ep.url, attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn base(&self) -> Endpoint<'_> {
        Endpoint {
            url: &self.config.base_url,
            model: &self.config.base_model,
            key: self.base_key.clone(),
        }
    }

    fn guide(&self) -> Endpoint<'_> {
        Endpoint {
            url: &self.config.guide_url,
            model: &self.config.guide_model,
            key: self.guide_key.clone(),
        }
    }

    fn collect_raw(&self, q: &Question) -> Result<Vec<RawRound>> {
        let mut history: Vec<(String, String)> = Vec::new();
        let mut rounds = Vec::with_capacity(self.config.horizon);
        let want_logprobs = self.config.uncertainty == UncertaintyEstimator::TokenLogprob;
        for t in 1..=self.config.horizon {
            let temperature = if t == 1 { 0.0 } else { 1.0 };
            let base = self.call(&self.base(), &base_prompt(&q.question, &history), temperature, false)?;
            let answer = extract_base_answer(&base.text);
            let guide = self.call(&self.guide(), &guide_prompt(&q.question, &answer), 0.0, want_logprobs)?;
            let judgment = parse_judgment(&guide.text)?;
            let agrees = judgment == Judgment::Agree;
            let heuristic = if agrees { 0.2 } else { 0.8 };
            let uncertainty = match (self.config.uncertainty, guide.first_logprob) {
                (UncertaintyEstimator::TokenLogprob, Some(lp)) => (1.0 - lp.exp()).clamp(0.0, 1.0),
                _ => heuristic,
            };
            let guide_answer = match judgment {
                Judgment::Agree => answer.clone(),
                Judgment::Correct(a) => a,
            };
            history.push((answer.clone(), guide.text.trim().to_string()));
            rounds.push(RawRound {
                base: answer,
                agrees,
                guide: guide_answer,
                uncertainty,
                base_in: base.tokens_in,
                base_out: base.tokens_out,
                guide_in: guide.tokens_in,
                guide_out: guide.tokens_out,
            });
        }
        Ok(rounds)
    }

    /// Collects one trace per question. Questions whose calls or replies fail
    /// after retries are skipped and reported.
    pub fn collect(&self, questions: &[Question]) -> Result<Collection> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<Vec<RawRound>>>>> = Mutex::new((0..questions.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..self.config.max_in_flight.min(questions.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(q) = questions.get(i) else { break };
                    let r = self.collect_raw(q);
                    results.lock().expect("collector results lock")[i] = Some(r);
                });
            }
        });
        let results = results.into_inner().expect("collector results lock");

        let mut vocab = Vocab::default();
        let mut traces = Vec::new();
        let mut skipped = Vec::new();
        for (q, r) in questions.iter().zip(results) {
            let raw = match r.expect("every question visited") {
                Ok(raw) => raw,
                Err(e) => {
                    log::warn!("skipping question {}: {e}", q.question_id);
                    skipped.push((q.question_id.clone(), e.to_string()));
                    continue;
                }
            };
            let mut staged = vocab.clone();
            let trace = Trace {
                question_id: q.question_id.clone(),
                true_answer: staged.id(&q.answer),
                rounds: raw
                    .iter()
                    .map(|r| {
                        let base = staged.id(&r.base);
                        RoundRecord {
                            base_answer: base,
                            guide_agrees: r.agrees,
                            guide_answer: if r.agrees { base } else { staged.id(&r.guide) },
                            guide_uncertainty: r.uncertainty,
                            base_tokens_in: r.base_in,
                            base_tokens_out: r.base_out,
                            guide_tokens_in: r.guide_in,
                            guide_tokens_out: r.guide_out,
                        }
                    })
                    .collect(),
                solvable_hint: None,
            };
            match validate_trace(&trace, self.config.horizon, staged.len() as u32) {
                Ok(()) => {
                    vocab = staged;
                    traces.push(trace);
                }
                Err(e) => {
                    log::warn!("skipping question {}: {e}", q.question_id);
                    skipped.push((q.question_id.clone(), e.to_string()));
                }
            }
        }
        let mut header = TraceHeader::new(self.config.horizon, vocab.len() as u32);
        header.answer_vocab = Some(vocab.words);
        header.base_prompt_framing = Some(format!("{BASE_FRAMING}\n--- history line ---\n{BASE_HISTORY_LINE}"));
        Ok(Collection {
            traces: TraceSet { header, traces },
            skipped,
        })
    }
}

#[derive(Clone, Debug)]
struct Vocab {
    words: Vec<String>,
    index: HashMap<String, AnswerId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            words: vec![ESCAPE_ANSWER.to_string()],
            index: HashMap::from([(ESCAPE_ANSWER.to_string(), 0)]),
        }
    }
}

impl Vocab {
    fn id(&mut self, text: &str) -> AnswerId {
        let key = normalize_answer(text);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.words.len() as AnswerId;
        self.words.push(key.clone());
        self.index.insert(key, id);
        id
    }

    fn len(&self) -> usize {
        self.words.len()
    }
}
