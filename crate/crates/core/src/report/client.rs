//! Chat-style multimodal clients: a deterministic mock, JSONL record/replay,
//! and (with the `http` feature) a chat-completions HTTP client.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

/// A PNG image carried inline. `id` names the source for logs and transcripts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageData {
    pub id: String,
    pub png_base64: String,
}

impl ImageData {
    pub fn from_png(id: impl Into<String>, png: &[u8]) -> Self {
        Self {
            id: id.into(),
            png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        }
    }

    pub fn data_url(&self) -> String {
        format!("data:image/png;base64,{}", self.png_base64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image { image: ImageData },
}

impl Part {
    pub fn text(t: impl Into<String>) -> Self {
        Part::Text { text: t.into() }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text { text } => Some(text),
            Part::Image { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::text(text)],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self { role: Role::User, parts }
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.parts.iter().filter_map(Part::as_text).collect::<Vec<_>>().join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageData> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image { image } => Some(image),
            Part::Text { .. } => None,
        })
    }
}

pub trait VlmClient: Send + Sync {
    fn generate(&self, messages: &[Message]) -> Result<String>;
}

impl<C: VlmClient + ?Sized> VlmClient for Box<C> {
    fn generate(&self, messages: &[Message]) -> Result<String> {
        (**self).generate(messages)
    }
}

impl<C: VlmClient + ?Sized> VlmClient for &C {
    fn generate(&self, messages: &[Message]) -> Result<String> {
        (**self).generate(messages)
    }
}

/// Exponential backoff: attempt `k` (0-based) waits `base·2^k`, capped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Calls `client`, retrying retriable failures and empty responses. Returns
/// the trimmed text and the number of retries spent.
pub fn generate_with_retry(client: &dyn VlmClient, messages: &[Message], policy: &RetryPolicy) -> Result<(String, u32)> {
    let mut attempt = 0;
    loop {
        let err = match client.generate(messages) {
            Ok(text) if !text.trim().is_empty() => return Ok((text.trim().to_string(), attempt)),
            Ok(_) => Error::Client {
                message: "empty response".into(),
                retriable: true,
            },
            Err(e) => e,
        };
        let retriable = matches!(err, Error::Client { retriable: true, .. });
        if !retriable || attempt >= policy.max_retries {
            return Err(err);
        }
        log::warn!("client call failed ({err}); retry {} of {}", attempt + 1, policy.max_retries);
        std::thread::sleep(policy.delay(attempt));
        attempt += 1;
    }
}

/// Runs `f` over `items` with at most `max_in_flight` concurrent calls.
/// Results come back in input order.
pub fn run_bounded<T: Sync, R: Send>(items: &[T], max_in_flight: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = max_in_flight.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

fn digest(messages: &[Message]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

type Responder = Box<dyn Fn(&[Message]) -> String + Send + Sync>;

/// Deterministic offline client. Records every request.
///
/// Without a script the reply is a fixed function of the request: report
/// requests get a four-section report, scoring requests a score line, and
/// anything else a short caption.
pub struct MockClient {
    responder: Responder,
    script: Mutex<VecDeque<Result<String>>>,
    calls: Mutex<Vec<Vec<Message>>>,
}

impl Default for MockClient {
    fn default() -> Self {
        Self::new()
    }
}

impl MockClient {
    pub fn new() -> Self {
        Self::with_responder(default_response)
    }

    pub fn with_responder(f: impl Fn(&[Message]) -> String + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(f),
            script: Mutex::new(VecDeque::new()),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Replies taken from `script` in order, then falls back to the default.
    pub fn scripted(script: Vec<Result<String>>) -> Self {
        let m = Self::new();
        *m.script.lock().expect("script lock") = script.into();
        m
    }

    pub fn calls(&self) -> Vec<Vec<Message>> {
        self.calls.lock().expect("calls lock").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("calls lock").len()
    }
}

impl VlmClient for MockClient {
    fn generate(&self, messages: &[Message]) -> Result<String> {
        self.calls.lock().expect("calls lock").push(messages.to_vec());
        if let Some(r) = self.script.lock().expect("script lock").pop_front() {
            return r;
        }
        Ok((self.responder)(messages))
    }
}

pub fn default_response(messages: &[Message]) -> String {
    let d = digest(messages);
    let n = u64::from_str_radix(&d[..8], 16).expect("hex digest");
    let text: String = messages.iter().map(Message::text).collect::<Vec<_>>().join("\n");
    if text.contains("Generated report:") {
        return format!("Score: {}. The generated report is compared with the reference for accuracy, comprehensiveness and details.", 1 + n % 10);
    }
    if text.contains("Extent:") || text.contains("assessment report") {
        let coverage = text
            .lines()
            .find_map(|l| l.split("coverage ").nth(1))
            .and_then(|r| r.split('%').next())
            .unwrap_or("unknown");
        return format!(
            "Extent:\nStanding water covers about {coverage}% of the view.\n\
             Depth:\nThe water appears shallow, around level {}.\n\
             Risk:\nVehicles and pedestrians face slipping and stalling risk.\n\
             Impact:\nTraffic is slowed on the affected lanes (mock {}).",
            n % 5,
            &d[..8]
        );
    }
    format!("A street scene under overcast light with wet road surfaces (mock {}).", &d[..8])
}

/// One request/response pair in a JSONL transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Vec<Message>,
    pub response: String,
}

pub fn read_transcript(path: &Path) -> Result<Vec<Exchange>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_transcript(path: &Path, exchanges: &[Exchange]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for ex in exchanges {
        writeln!(f, "{}", serde_json::to_string(ex)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Wraps a client and keeps every successful exchange for [`write_transcript`].
pub struct RecordingClient<C> {
    inner: C,
    log: Mutex<Vec<Exchange>>,
}

impl<C: VlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_transcript(path, &self.exchanges())
    }
}

impl<C: VlmClient> VlmClient for RecordingClient<C> {
    fn generate(&self, messages: &[Message]) -> Result<String> {
        let response = self.inner.generate(messages)?;
        self.log.lock().expect("log lock").push(Exchange {
            request: messages.to_vec(),
            response: response.clone(),
        });
        Ok(response)
    }
}

/// Answers requests from a transcript, matching on the exact request.
/// Repeated identical requests are served in recorded order.
pub struct ReplayClient {
    table: Mutex<HashMap<String, VecDeque<String>>>,
}

impl ReplayClient {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        let mut table: HashMap<String, VecDeque<String>> = HashMap::new();
        for ex in exchanges {
            table.entry(digest(&ex.request)).or_default().push_back(ex.response);
        }
        Self { table: Mutex::new(table) }
    }

    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self::new(read_transcript(path)?))
    }
}

impl VlmClient for ReplayClient {
    fn generate(&self, messages: &[Message]) -> Result<String> {
        let key = digest(messages);
        self.table
            .lock()
            .expect("table lock")
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Client {
                message: format!("request {} not found in transcript", &key[..12]),
                retriable: false,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    #[default]
    Mock,
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub kind: ClientKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub temperature: f64,
    /// Transcript read by the replay client.
    pub transcript: Option<PathBuf>,
    /// When set, every exchange is appended to this transcript.
    pub record: Option<PathBuf>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: ClientKind::Mock,
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "deepseek-vl2".into(),
            token_env: "WATERSEG_API_TOKEN".into(),
            timeout_secs: 120,
            temperature: 0.0,
            transcript: None,
            record: None,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ClientKind::Replay && self.transcript.is_none() {
            return Err(Error::config("report.client.transcript is required for the replay client"));
        }
        if self.kind == ClientKind::Http && self.endpoint.is_empty() {
            return Err(Error::config("report.client.endpoint must not be empty"));
        }
        Ok(())
    }
}

pub fn build_client(cfg: &ClientConfig) -> Result<Box<dyn VlmClient>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ClientKind::Mock => Box::new(MockClient::new()),
        ClientKind::Replay => Box::new(ReplayClient::open(cfg.transcript.as_deref().expect("validated"))?),
        ClientKind::Http => http_client(cfg)?,
    })
}

#[cfg(feature = "http")]
fn http_client(cfg: &ClientConfig) -> Result<Box<dyn VlmClient>> {
    Ok(Box::new(http::HttpClient::new(cfg)?))
}

#[cfg(not(feature = "http"))]
fn http_client(_: &ClientConfig) -> Result<Box<dyn VlmClient>> {
    Err(Error::config("this build has no HTTP client; rebuild with the `http` feature"))
}

/// Request body in the chat-completions wire format.
pub fn chat_request_body(model: &str, temperature: f64, messages: &[Message]) -> serde_json::Value {
    let msgs: Vec<serde_json::Value> = messages
        .iter()
        .map(|m| {
            let content: Vec<serde_json::Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text { text } => serde_json::json!({"type": "text", "text": text}),
                    Part::Image { image } => serde_json::json!({"type": "image_url", "image_url": {"url": image.data_url()}}),
                })
                .collect();
            serde_json::json!({"role": m.role, "content": content})
        })
        .collect();
    serde_json::json!({"model": model, "temperature": temperature, "messages": msgs})
}

/// Pulls `choices[0].message.content` out of a chat-completions response.
pub fn parse_chat_response(body: &serde_json::Value) -> Result<String> {
    let content = &body["choices"][0]["message"]["content"];
    if let Some(s) = content.as_str() {
        return Ok(s.to_string());
    }
    if let Some(parts) = content.as_array() {
        return Ok(parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""));
    }
    Err(Error::Client {
        message: format!("response has no message content: {body}"),
        retriable: false,
    })
}

#[cfg(feature = "http")]
mod http {
    use super::*;

    pub struct HttpClient {
        agent: reqwest::blocking::Client,
        endpoint: String,
        model: String,
        temperature: f64,
        token: Option<String>,
    }

    impl HttpClient {
        pub fn new(cfg: &ClientConfig) -> Result<Self> {
            let agent = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(cfg.timeout_secs))
                .build()
                .map_err(|e| Error::config(format!("http client: {e}")))?;
            Ok(Self {
                agent,
                endpoint: cfg.endpoint.clone(),
                model: cfg.model.clone(),
                temperature: cfg.temperature,
                token: std::env::var(&cfg.token_env).ok(),
            })
        }
    }

    impl VlmClient for HttpClient {
        fn generate(&self, messages: &[Message]) -> Result<String> {
            let mut req = self.agent.post(&self.endpoint).json(&chat_request_body(&self.model, self.temperature, messages));
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = req.send().map_err(|e| Error::Client {
                message: e.to_string(),
                retriable: e.is_timeout() || e.is_connect(),
            })?;
            let status = resp.status();
            if !status.is_success() {
                let body = resp.text().unwrap_or_default();
                return Err(Error::Client {
                    message: format!("HTTP {status}: {body}"),
                    retriable: status.as_u16() == 429 || status.is_server_error(),
                });
            }
            let body: serde_json::Value = resp.json().map_err(|e| Error::Client {
                message: format!("bad response body: {e}"),
                retriable: false,
            })?;
            parse_chat_response(&body)
        }
    }
}
