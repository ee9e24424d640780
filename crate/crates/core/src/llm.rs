//! Chat-completion gateway with live, mock and replay backends.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, LazyLock};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompts::PromptKind;
use crate::seeding;
use crate::tkg::Timestamp;

pub const API_KEY_ENV: &str = "CHRONOEXPLAIN_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request {id}: {reason}")]
    Precondition { id: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("replay log has no matching response for request {0}")]
    ReplayMiss(String),
    #[error("audit log: {0}")]
    Io(#[from] std::io::Error),
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Worth retrying: timeouts, rate limits, 5xx.
    Transient(String),
    Auth(String),
    Fatal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendTag {
    Live,
    Mock,
    Replay,
}

impl fmt::Display for BackendTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendTag::Live => "live",
            BackendTag::Mock => "mock",
            BackendTag::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub id: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
    /// Earlier turns of the same conversation, oldest first.
    #[serde(default)]
    pub history: Vec<ChatMessage>,
    #[serde(default)]
    pub kind: Option<PromptKind>,
}

impl CompletionRequest {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 1024,
            model: "gpt-3.5-turbo".into(),
            history: Vec::new(),
            kind: None,
        }
    }

    pub fn kind(mut self, kind: PromptKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn history(mut self, history: Vec<ChatMessage>) -> Self {
        self.history = history;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let fail = |reason: &str| Err(LlmError::Precondition { id: self.id.clone(), reason: reason.into() });
        if self.prompt.trim().is_empty() {
            return fail("empty prompt");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return fail("temperature outside [0, 2]");
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be positive");
        }
        Ok(())
    }

    /// History followed by the prompt as the final user turn.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut m = self.history.clone();
        m.push(ChatMessage::user(self.prompt.clone()));
        m
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    pub backend: BackendTag,
}

pub trait Backend: Send + Sync {
    fn tag(&self) -> BackendTag;
    fn call(&self, request: &CompletionRequest) -> Result<(String, TokenUsage), Failure>;
}

// ---------------------------------------------------------------------------
// Verdicts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Correct,
    Wrong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no correct/wrong verdict in {0:?}")]
pub struct UnparseableVerdict(pub String);

static VERDICT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(correct|incorrect|wrong)\b").expect("valid regex"));
static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?](\s|$)|\n").expect("valid regex"));

/// Text up to the end of the first sentence.
pub fn first_sentence(text: &str) -> &str {
    let text = text.trim_start();
    match SENTENCE_END.find(text) {
        Some(m) => &text[..m.start()],
        None => text,
    }
}

pub fn classify_verdict(text: &str) -> Result<Verdict, UnparseableVerdict> {
    let trimmed = text.trim_start();
    let head = first_sentence(trimmed);
    let m = VERDICT.find(head).ok_or_else(|| UnparseableVerdict(text.to_owned()))?;
    let decision = if m.as_str().eq_ignore_ascii_case("correct") { Decision::Correct } else { Decision::Wrong };
    let rest = trimmed[m.end()..].trim_start_matches(|c: char| c.is_whitespace() || ".,:;!-\u{2014}\u{2013}".contains(c));
    Ok(Verdict { decision, rationale: rest.trim_end().to_owned() })
}

// ---------------------------------------------------------------------------
// Mock backend

/// Deterministic stand-in for a chat model; output depends only on the request and seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend {
    pub seed: u64,
}

static QUAD_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\((.+), (.+), (.+), (\d{2}-\d{2}-\d{4})\)$").expect("valid regex"));
static US_DATE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(\d{2})-(\d{2})-(\d{4})\b").expect("valid regex"));
static EXPLANATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)^(.*?)\s*(?:Here are my reasons|We could find the following patterns from the text):\s*(.*?)[.,]\s*(?i:therefore),\s*(.*?)\.?\s*$")
        .expect("valid regex")
});
static REASON_SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:,\s*and\s+)?\b\d+:\s+").expect("valid regex"));
static EVAL_TEXT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?s)Given the text,\s*"?(.*?)"?,\s*please evaluate"#).expect("valid regex"));
static NEUTRAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?s)document "(.*?)", how likely the event that (.+?) in (\S+) would happen"#).expect("valid regex")
});

struct Explanation<'a> {
    intro: &'a str,
    reasons: Vec<&'a str>,
    conclusion: &'a str,
}

fn split_explanation(text: &str) -> Option<Explanation<'_>> {
    let caps = EXPLANATION.captures(text.trim())?;
    let reasons = REASON_SPLIT
        .split(caps.get(2)?.as_str())
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .collect();
    Some(Explanation { intro: caps.get(1)?.as_str(), reasons, conclusion: caps.get(3)?.as_str() })
}

fn parse_us_date(text: &str) -> Option<Timestamp> {
    let c = US_DATE.captures(text)?;
    Timestamp::from_ymd(c[3].parse().ok()?, c[1].parse().ok()?, c[2].parse().ok()?)
}

fn last_us_date(text: &str) -> Option<Timestamp> {
    US_DATE.find_iter(text).last().and_then(|m| parse_us_date(m.as_str()))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn explained_text(request: &CompletionRequest) -> Option<String> {
    request
        .history
        .iter()
        .chain(std::iter::once(&ChatMessage::user(request.prompt.clone())))
        .filter(|m| m.role == Role::User)
        .find_map(|m| EVAL_TEXT.captures(&m.content).map(|c| c[1].to_owned()))
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn pick<'a>(&self, key: &str, options: &[&'a str]) -> &'a str {
        let h = seeding::derive(self.seed, seeding::stable_hash(key));
        options[(h % options.len() as u64) as usize]
    }

    fn context_doc(&self, prompt: &str) -> String {
        let sentences: Vec<String> = prompt
            .lines()
            .filter_map(|line| QUAD_LINE.captures(line.trim()))
            .map(|c| {
                let frame = self.pick(&c[0], &["On {t}, {s} chose to {r} {o}.", "{S} {r} {o} on {t}.", "It was reported on {t} that {s} would {r} {o}."]);
                frame
                    .replace("{S}", &capitalize(&c[1]))
                    .replace("{s}", &c[1])
                    .replace("{r}", &c[2].to_lowercase())
                    .replace("{o}", &c[3])
                    .replace("{t}", &c[4])
            })
            .collect();
        if sentences.is_empty() {
            "No events were listed, so there is nothing to describe.".into()
        } else {
            sentences.join(" ")
        }
    }

    fn evaluate(&self, request: &CompletionRequest) -> String {
        let text = explained_text(request).unwrap_or_else(|| request.prompt.clone());
        let Some(exp) = split_explanation(&text) else {
            return "Wrong. The text gives no dated reasoning steps.".into();
        };
        let Some(target) = last_us_date(exp.conclusion) else {
            return "Wrong. The prediction has no date.".into();
        };
        if exp.reasons.is_empty() {
            return "Wrong. The text gives no reasoning steps.".into();
        }
        for reason in &exp.reasons {
            match last_us_date(reason) {
                Some(t) if t < target => {}
                Some(t) => {
                    return format!(
                        "Wrong. The step dated {} does not precede the predicted date {}.",
                        t.us_format(),
                        target.us_format()
                    )
                }
                None => return format!("Wrong. The step \"{reason}\" has no date."),
            }
        }
        format!("Correct. Every reasoning step happens before {} and supports the prediction.", target.us_format())
    }

    fn polish(&self, request: &CompletionRequest) -> String {
        let Some(text) = explained_text(request) else {
            return request.prompt.clone();
        };
        let Some(exp) = split_explanation(&text) else {
            return text;
        };
        let connectives = ["First", "Then", "After that", "Next", "In addition", "Moreover"];
        let steps: Vec<String> = exp
            .reasons
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let tail = self.pick(r, &["which is a relevant precedent", "showing an ongoing interaction", "which points in the same direction"]);
                format!("{}, {r}, {tail}.", connectives[i.min(connectives.len() - 1)])
            })
            .collect();
        format!(
            "{}. {} Taken together, these steps form a consistent timeline. Therefore, {}.",
            exp.intro.trim_end_matches('.'),
            steps.join(" "),
            exp.conclusion.trim_end_matches('.')
        )
    }

    fn revise(&self, request: &CompletionRequest) -> String {
        let mut facts: Vec<(Timestamp, String)> = request
            .prompt
            .lines()
            .filter_map(|line| QUAD_LINE.captures(line.trim()))
            .filter_map(|c| Some((parse_us_date(&c[4])?, format!("on {}, {} {} {}", &c[4], &c[1], c[2].to_lowercase(), &c[3]))))
            .collect();
        facts.sort();
        let chain: Vec<String> = facts.into_iter().map(|(_, f)| f).collect();
        let explained = explained_text(request);
        let exp = explained.as_deref().and_then(split_explanation);
        let (intro, conclusion) = match &exp {
            Some(e) => (e.intro.trim_end_matches('.').to_owned(), format!("Therefore, {}", e.conclusion.trim_end_matches('.'))),
            None => ("Based on the information provided by the document".to_owned(), "The prediction follows from these events".to_owned()),
        };
        if chain.is_empty() {
            return format!("{intro}. {conclusion}.");
        }
        format!(
            "{intro}. Reviewing the events in time order: {}. Each step precedes the predicted event. {conclusion}.",
            chain.join("; ")
        )
    }

    fn neutral(&self, prompt: &str) -> String {
        let Some(c) = NEUTRAL.captures(prompt) else {
            return "Unsure. The context does not mention the event, so it cannot be predicted.".into();
        };
        let summary = first_sentence(&c[1]).trim_end_matches('.').to_owned();
        let lead = self.pick(prompt, &["The document mainly reports that", "The context describes how"]);
        format!(
            "Unsure. {lead} {}. None of these events involve the parties of the event that {} in {}, so the context is not related and gives no basis for a prediction.",
            summary.trim(),
            &c[2],
            &c[3]
        )
    }
}

fn word_count(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}

impl Backend for MockBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Mock
    }

    fn call(&self, request: &CompletionRequest) -> Result<(String, TokenUsage), Failure> {
        let text = match request.kind {
            Some(PromptKind::ContextDoc) => self.context_doc(&request.prompt),
            Some(PromptKind::EvalCorrectness | PromptKind::EvalNegative) => self.evaluate(request),
            Some(PromptKind::Polish) => self.polish(request),
            Some(PromptKind::Revision) => self.revise(request),
            Some(PromptKind::Neutral) => self.neutral(&request.prompt),
            None => format!("Unsure. {}", first_sentence(&request.prompt)),
        };
        let prompt_tokens = request.messages().iter().map(|m| word_count(&m.content)).sum();
        Ok((text.clone(), TokenUsage { prompt: prompt_tokens, completion: word_count(&text) }))
    }
}

// ---------------------------------------------------------------------------
// Live backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Chat-completions endpoint URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: API_KEY_ENV.into(),
            timeout_secs: 60,
        }
    }
}

pub struct LiveBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageOut,
}

#[derive(Deserialize)]
struct ChatMessageOut {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

impl LiveBackend {
    /// Reads the key from the configured environment variable.
    pub fn from_env(config: &LiveConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| LlmError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: &LiveConfig, api_key: String) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { client, endpoint: config.endpoint.clone(), api_key })
    }
}

impl Backend for LiveBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Live
    }

    fn call(&self, request: &CompletionRequest) -> Result<(String, TokenUsage), Failure> {
        let body = serde_json::json!({
            "model": request.model,
            "messages": request.messages(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Failure::Auth(format!("endpoint answered {status}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("endpoint answered {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("endpoint answered {status}")));
        }
        let parsed: ChatResponse = response.json().map_err(|e| Failure::Fatal(format!("bad response body: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| Failure::Transient("empty completion".into()))?;
        let usage = parsed
            .usage
            .map(|u| TokenUsage { prompt: u.prompt_tokens, completion: u.completion_tokens })
            .unwrap_or_default();
        Ok((text, usage))
    }
}

// ---------------------------------------------------------------------------
// Audit log and replay

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub request_id: String,
    pub prompt: String,
    pub response: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditClock {
    Wall,
    /// Sequence-numbered seconds after the epoch, for reproducible logs.
    Logical,
}

/// Append-only newline-delimited audit log.
pub struct AuditLog {
    path: PathBuf,
    writer: Mutex<(BufWriter<File>, u64)>,
    clock: AuditClock,
    config_hash: Option<String>,
}

impl AuditLog {
    pub fn create(path: &Path, clock: AuditClock) -> Result<Self, LlmError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_owned(), writer: Mutex::new((BufWriter::new(file), 0)), clock, config_hash: None })
    }

    /// Stamps every record with the producing configuration.
    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, request: &CompletionRequest, response: &str) -> Result<(), LlmError> {
        let mut guard = self.writer.lock();
        guard.1 += 1;
        let timestamp = match self.clock {
            AuditClock::Wall => chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            AuditClock::Logical => chrono::DateTime::from_timestamp(guard.1 as i64, 0)
                .expect("in range")
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let record = AuditRecord {
            request_id: request.id.clone(),
            prompt: request.prompt.clone(),
            response: response.to_owned(),
            timestamp,
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_writer(&mut guard.0, &record).map_err(std::io::Error::other)?;
        guard.0.write_all(b"\n")?;
        guard.0.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<AuditRecord>, LlmError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            out.push(record);
        }
        Ok(out)
    }
}

/// Serves responses recorded in an audit log, keyed by request id.
pub struct ReplayBackend {
    responses: HashMap<String, AuditRecord>,
}

impl ReplayBackend {
    pub fn from_records(records: Vec<AuditRecord>) -> Self {
        Self { responses: records.into_iter().map(|r| (r.request_id.clone(), r)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::from_records(AuditLog::read(path)?))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Replay
    }

    fn call(&self, request: &CompletionRequest) -> Result<(String, TokenUsage), Failure> {
        match self.responses.get(&request.id) {
            Some(r) if r.prompt == request.prompt => Ok((r.response.clone(), TokenUsage::default())),
            Some(_) => Err(Failure::Fatal(format!("recorded prompt for {} differs", request.id))),
            None => Err(Failure::Fatal(format!("no recorded response for {}", request.id))),
        }
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self { max_retries: 4, base_delay_ms: 500, max_delay_ms: 30_000, max_in_flight: 4 }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), available: Condvar::new() }
    }

    fn acquire(&self) {
        let mut p = self.permits.lock();
        while *p == 0 {
            self.available.wait(&mut p);
        }
        *p -= 1;
    }

    fn release(&self) {
        *self.permits.lock() += 1;
        self.available.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    config: GatewayConfig,
    audit: Option<AuditLog>,
    gate: Semaphore,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    attempts: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, config: GatewayConfig) -> Self {
        let gate = Semaphore::new(config.max_in_flight);
        Self {
            backend,
            config,
            audit: None,
            gate,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn mock(seed: u64) -> Self {
        Self::new(Box::new(MockBackend::new(seed)), GatewayConfig::default())
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn backend_tag(&self) -> BackendTag {
        self.backend.tag()
    }

    /// Highest number of simultaneous backend calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Backend calls made so far, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    fn call_once(&self, request: &CompletionRequest) -> Result<(String, TokenUsage), Failure> {
        self.gate.acquire();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let out = self.backend.call(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.gate.release();
        out
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.config.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.config.max_delay_ms))
    }

    fn run(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.validate()?;
        let start = Instant::now();
        let mut attempt = 0u32;
        loop {
            match self.call_once(request) {
                Ok((text, usage)) if !text.trim().is_empty() => {
                    return Ok(CompletionResult {
                        text,
                        usage,
                        latency_ms: start.elapsed().as_millis() as u64,
                        backend: self.backend.tag(),
                    })
                }
                Ok(_) => return Err(LlmError::Transport { attempts: attempt + 1, reason: "empty completion".into() }),
                Err(Failure::Auth(reason)) => return Err(LlmError::Config(format!("authentication failed: {reason}"))),
                Err(Failure::Fatal(reason)) if self.backend.tag() == BackendTag::Replay => {
                    log::debug!("{reason}");
                    return Err(LlmError::ReplayMiss(request.id.clone()));
                }
                Err(Failure::Fatal(reason)) => return Err(LlmError::Transport { attempts: attempt + 1, reason }),
                Err(Failure::Transient(reason)) => {
                    if attempt >= self.config.max_retries {
                        return Err(LlmError::Transport { attempts: attempt + 1, reason });
                    }
                    let delay = self.backoff(attempt);
                    log::warn!("request {} failed ({reason}); retrying in {delay:?}", request.id);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn record(&self, request: &CompletionRequest, result: &Result<CompletionResult, LlmError>) -> Result<(), LlmError> {
        if let (Some(audit), Ok(r)) = (&self.audit, result) {
            audit.append(request, &r.text)?;
        }
        Ok(())
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        let result = self.run(request);
        self.record(request, &result)?;
        result
    }

    /// Runs requests with at most `max_in_flight` in parallel; results and audit
    /// records follow input order.
    pub fn complete_batch(&self, requests: &[CompletionRequest]) -> Vec<Result<CompletionResult, LlmError>> {
        let workers = self.config.max_in_flight.max(1).min(requests.len());
        let mut slots: Vec<Option<Result<CompletionResult, LlmError>>> = (0..requests.len()).map(|_| None).collect();
        if workers <= 1 {
            for (slot, request) in slots.iter_mut().zip(requests) {
                *slot = Some(self.run(request));
            }
        } else {
            let next = AtomicUsize::new(0);
            let (tx, rx) = mpsc::channel();
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    let tx = tx.clone();
                    let next = &next;
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(request) = requests.get(i) else { break };
                        if tx.send((i, self.run(request))).is_err() {
                            break;
                        }
                    });
                }
            });
            drop(tx);
            for (i, r) in rx {
                slots[i] = Some(r);
            }
        }
        slots
            .into_iter()
            .zip(requests)
            .map(|(slot, request)| {
                let result = slot.expect("every request ran");
                match self.record(request, &result) {
                    Ok(()) => result,
                    Err(e) => Err(e),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::Arc;

    fn fprime() -> &'static str {
        "Based on the information provided by the document, it is plausible that China will host a visit Barack Obama on 11-10-2014. Here are my reasons: 1: Iran sign formal agreement Barack Obama on 11-06-2014, and 2: Barack Obama express intent to meet China on 11-04-2014. Therefore, it is plausible that China will host a visit Barack Obama on 11-10-2014"
    }

    fn eval_prompt(explanation: &str) -> String {
        format!("Given the text, {explanation}, please evaluate the correctness of the prediction based on the reasoning steps shown in the text. Answer correct or wrong then explain your decision concisely")
    }

    #[test]
    fn verdict_examples() {
        let v = classify_verdict("Correct. The chain of visits supports it.").unwrap();
        assert_eq!(v, Verdict { decision: Decision::Correct, rationale: "The chain of visits supports it.".into() });
        let v = classify_verdict("wrong \u{2014} the reasoning skips a step").unwrap();
        assert_eq!(v.decision, Decision::Wrong);
        assert_eq!(v.rationale, "the reasoning skips a step");
        assert!(classify_verdict("The answer is unclear").is_err());
        assert!(classify_verdict("Unclear. The answer is correct.").is_err());
        assert_eq!(classify_verdict("This is incorrect.").unwrap().decision, Decision::Wrong);
        assert!(classify_verdict("").is_err());
    }

    #[test]
    fn verdict_matches_token_scan_oracle() {
        let cases = [
            "Correct, everything lines up",
            "I think it is wrong: dates reversed",
            "Overall the prediction is CORRECT.",
            "Correctness cannot be judged",
            "No verdict here. But wrong later.",
            "wrongly dated events",
        ];
        for text in cases {
            let head: String = text.split(['.', '\n']).next().unwrap().to_lowercase();
            let words: Vec<&str> = head.split(|c: char| !c.is_alphanumeric()).collect();
            let expected = words.iter().find_map(|w| match *w {
                "correct" => Some(Decision::Correct),
                "wrong" | "incorrect" => Some(Decision::Wrong),
                _ => None,
            });
            assert_eq!(classify_verdict(text).ok().map(|v| v.decision), expected, "{text}");
        }
    }

    #[test]
    fn empty_prompt_and_temperature_are_rejected() {
        let gw = Gateway::mock(0);
        assert!(matches!(gw.complete(&CompletionRequest::new("a", "  ")), Err(LlmError::Precondition { .. })));
        let r = CompletionRequest::new("b", "hi").temperature(2.5);
        assert!(matches!(gw.complete(&r), Err(LlmError::Precondition { .. })));
        assert_eq!(gw.attempts(), 0);
    }

    #[test]
    fn mock_context_doc_has_one_sentence_per_quadruple() {
        let prompt = "Please generate a coherent paragraph to describe the following quadruples and the time should be precise to dates:\n(Iran, sign formal agreement, Barack Obama, 11-06-2014)\n(China, consult, France, 11-07-2014)";
        let gw = Gateway::mock(3);
        let req = CompletionRequest::new("d", prompt).kind(PromptKind::ContextDoc);
        let out = gw.complete(&req).unwrap();
        assert_eq!(out.backend, BackendTag::Mock);
        assert_eq!(out.text.matches(". ").count() + 1, 2, "{}", out.text);
        assert!(out.text.contains("Iran") && out.text.contains("France") && out.text.contains("11-07-2014"));
        assert_eq!(Gateway::mock(3).complete(&req).unwrap().text, out.text);
    }

    #[test]
    fn mock_eval_judges_temporal_soundness() {
        let gw = Gateway::mock(0);
        let req = CompletionRequest::new("e", eval_prompt(fprime())).kind(PromptKind::EvalCorrectness);
        let v = classify_verdict(&gw.complete(&req).unwrap().text).unwrap();
        assert_eq!(v.decision, Decision::Correct);

        let late = fprime().replace("11-06-2014", "11-12-2014");
        let req = CompletionRequest::new("f", eval_prompt(&late)).kind(PromptKind::EvalCorrectness);
        let v = classify_verdict(&gw.complete(&req).unwrap().text).unwrap();
        assert_eq!(v.decision, Decision::Wrong);
        assert!(v.rationale.contains("11-12-2014"));
    }

    #[test]
    fn mock_polish_reads_history() {
        let gw = Gateway::mock(0);
        let eval = eval_prompt(fprime());
        let req = CompletionRequest::new("p", "Can you make the text more coherent and readable by expanding the explanation of each reasoning step?")
            .kind(PromptKind::Polish)
            .history(vec![ChatMessage::user(eval), ChatMessage::assistant("Correct. Fine.")]);
        let out = gw.complete(&req).unwrap().text;
        assert!(out.starts_with("Based on the information provided by the document"));
        assert!(out.contains("First, Iran sign formal agreement Barack Obama on 11-06-2014"));
        assert!(out.ends_with("Therefore, it is plausible that China will host a visit Barack Obama on 11-10-2014."));
    }

    #[test]
    fn mock_revision_orders_quadruples() {
        let gw = Gateway::mock(0);
        let prompt = "Please revise the provided text.\n(b, r, c, 02-01-2014)\n(a, r, b, 01-01-2014)";
        let req = CompletionRequest::new("r", prompt)
            .kind(PromptKind::Revision)
            .history(vec![ChatMessage::user(eval_prompt(fprime())), ChatMessage::assistant("Wrong.")]);
        let out = gw.complete(&req).unwrap().text;
        let a = out.find("on 01-01-2014, a r b").unwrap();
        let b = out.find("on 02-01-2014, b r c").unwrap();
        assert!(a < b);
    }

    #[test]
    fn mock_neutral_is_unsure() {
        let gw = Gateway::mock(0);
        let prompt = "Given the document \"China consult France on 11-07-2014. More.\", how likely the event that Kenya host a visit Peru in 2014-11-10 would happen? Please note...";
        let out = gw.complete(&CompletionRequest::new("n", prompt).kind(PromptKind::Neutral)).unwrap().text;
        assert!(out.starts_with("Unsure."));
        assert!(out.contains("Kenya host a visit Peru in 2014-11-10"));
    }

    struct Flaky {
        failures: AtomicUsize,
        failure: Failure,
    }

    impl Backend for Flaky {
        fn tag(&self) -> BackendTag {
            BackendTag::Live
        }
        fn call(&self, _: &CompletionRequest) -> Result<(String, TokenUsage), Failure> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(self.failure.clone());
            }
            Ok(("ok".into(), TokenUsage::default()))
        }
    }

    fn fast() -> GatewayConfig {
        GatewayConfig { max_retries: 3, base_delay_ms: 1, max_delay_ms: 4, max_in_flight: 2 }
    }

    #[test]
    fn retries_transient_failures_until_cap() {
        let gw = Gateway::new(Box::new(Flaky { failures: AtomicUsize::new(2), failure: Failure::Transient("503".into()) }), fast());
        assert_eq!(gw.complete(&CompletionRequest::new("x", "p")).unwrap().text, "ok");
        assert_eq!(gw.attempts(), 3);

        let gw = Gateway::new(Box::new(Flaky { failures: AtomicUsize::new(10), failure: Failure::Transient("503".into()) }), fast());
        let err = gw.complete(&CompletionRequest::new("x", "p")).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 4, .. }), "{err}");
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let gw = Gateway::new(Box::new(Flaky { failures: AtomicUsize::new(10), failure: Failure::Auth("401".into()) }), fast());
        assert!(matches!(gw.complete(&CompletionRequest::new("x", "p")), Err(LlmError::Config(_))));
        assert_eq!(gw.attempts(), 1);
    }

    #[test]
    fn backoff_doubles_and_saturates() {
        let gw = Gateway::new(Box::new(MockBackend::new(0)), GatewayConfig { base_delay_ms: 100, max_delay_ms: 500, ..fast() });
        let d: Vec<u64> = (0..5).map(|a| gw.backoff(a).as_millis() as u64).collect();
        assert_eq!(d, [100, 200, 400, 500, 500]);
    }

    struct Slow;

    impl Backend for Slow {
        fn tag(&self) -> BackendTag {
            BackendTag::Mock
        }
        fn call(&self, r: &CompletionRequest) -> Result<(String, TokenUsage), Failure> {
            std::thread::sleep(Duration::from_millis(5));
            Ok((r.id.clone(), TokenUsage::default()))
        }
    }

    #[test]
    fn batch_respects_cap_and_order() {
        let cfg = GatewayConfig { max_in_flight: 3, ..fast() };
        let gw = Arc::new(Gateway::new(Box::new(Slow), cfg));
        let reqs: Vec<CompletionRequest> = (0..20).map(|i| CompletionRequest::new(format!("r{i}"), "p")).collect();
        let out = gw.complete_batch(&reqs);
        let ids: Vec<String> = out.into_iter().map(|r| r.unwrap().text).collect();
        assert_eq!(ids, (0..20).map(|i| format!("r{i}")).collect::<Vec<_>>());
        assert!(gw.peak_in_flight() <= 3 && gw.peak_in_flight() >= 2, "{}", gw.peak_in_flight());

        // Callers outside the batch share the same cap.
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let gw = Arc::clone(&gw);
                std::thread::spawn(move || gw.complete(&CompletionRequest::new(format!("t{i}"), "p")).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(gw.peak_in_flight() <= 3);
    }

    #[test]
    fn audit_then_replay_reproduces_responses() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("audit.jsonl");
        let gw = Gateway::mock(9).with_audit(AuditLog::create(&log, AuditClock::Logical).unwrap());
        let reqs: Vec<CompletionRequest> = (0..5)
            .map(|i| CompletionRequest::new(format!("q{i}"), format!("(a{i}, r, b, 01-0{}-2014)", i + 1)).kind(PromptKind::ContextDoc))
            .collect();
        let live: Vec<String> = gw.complete_batch(&reqs).into_iter().map(|r| r.unwrap().text).collect();
        let records = AuditLog::read(&log).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[0].timestamp, "1970-01-01T00:00:01Z");
        assert_eq!(records.iter().map(|r| r.request_id.as_str()).collect::<Vec<_>>(), ["q0", "q1", "q2", "q3", "q4"]);

        let replay = Gateway::new(Box::new(ReplayBackend::load(&log).unwrap()), fast());
        let again: Vec<String> = replay.complete_batch(&reqs).into_iter().map(|r| r.unwrap().text).collect();
        assert_eq!(again, live);
        let miss = replay.complete(&CompletionRequest::new("zz", "p"));
        assert!(matches!(miss, Err(LlmError::ReplayMiss(id)) if id == "zz"));
        let changed = replay.complete(&CompletionRequest::new("q0", "different"));
        assert!(matches!(changed, Err(LlmError::ReplayMiss(_))));
    }

    /// Minimal HTTP server answering with the scripted statuses, then 200.
    fn serve(script: Vec<u16>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&hits);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(end) = text.find("\r\n\r\n") {
                        let len = text
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= end + 4 + len {
                            break;
                        }
                    }
                }
                let i = counter.fetch_add(1, Ordering::SeqCst);
                let status = script.get(i).copied().unwrap_or(200);
                let body = if status == 200 {
                    r#"{"choices":[{"message":{"role":"assistant","content":"Correct. Looks right."}}],"usage":{"prompt_tokens":7,"completion_tokens":3}}"#
                } else {
                    r#"{"error":"nope"}"#
                };
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        (format!("http://{addr}/v1/chat/completions"), hits)
    }

    fn live(endpoint: String) -> Gateway {
        let cfg = LiveConfig { endpoint, timeout_secs: 5, ..LiveConfig::default() };
        Gateway::new(Box::new(LiveBackend::with_key(&cfg, "k".into()).unwrap()), fast())
    }

    #[test]
    fn live_backend_retries_server_errors() {
        let (url, hits) = serve(vec![503, 429]);
        let out = live(url).complete(&CompletionRequest::new("l", "hello")).unwrap();
        assert_eq!(out.text, "Correct. Looks right.");
        assert_eq!(out.usage, TokenUsage { prompt: 7, completion: 3 });
        assert_eq!(out.backend, BackendTag::Live);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn live_backend_auth_failure_is_configuration_error() {
        let (url, hits) = serve(vec![401, 401, 401]);
        let err = live(url).complete(&CompletionRequest::new("l", "hello")).unwrap_err();
        assert!(matches!(err, LlmError::Config(_)), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_key_is_configuration_error() {
        let cfg = LiveConfig { api_key_env: "CHRONOEXPLAIN_TEST_UNSET_KEY".into(), ..LiveConfig::default() };
        assert!(matches!(LiveBackend::from_env(&cfg), Err(LlmError::Config(_))));
    }
}
