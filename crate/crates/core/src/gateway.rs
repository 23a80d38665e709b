//! Chat-completion access with deterministic record/replay.
//!
//! Every stage talks to a [`ChatModel`]. Offline runs use [`ReplayModel`]
//! backed by a [`ReplayStore`]; [`RecordingModel`] wraps any upstream model
//! and persists each new response; [`LiveClient`] speaks the common
//! chat-completions HTTP/JSON shape.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Stage tag; used for logging only and excluded from fingerprints.
    pub request_tag: String,
}

impl ChatRequest {
    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub fn user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Live,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub provider: Provider,
    pub cache_hit: bool,
    pub latency: f64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no replay entry for fingerprint {fingerprint} (stage `{tag}`)")]
    MissingReplayEntry { fingerprint: String, tag: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    TransportError { attempts: u32, message: String },
    #[error("provider returned an empty completion (stage `{tag}`)")]
    EmptyCompletion { tag: String },
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error("replay store error: {0}")]
    Store(#[from] io::Error),
}

pub trait ChatModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: ChatModel + ?Sized> ChatModel for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    model: &'a str,
    messages: Vec<(&'a str, &'a str)>,
    temperature: f64,
}

/// Hex SHA-256 over the canonical JSON of (model, ordered messages,
/// temperature). The request tag does not participate.
pub fn fingerprint(request: &ChatRequest) -> String {
    let input = FingerprintInput {
        model: &request.model_name,
        messages: request
            .messages
            .iter()
            .map(|m| (m.role.as_str(), m.content.as_str()))
            .collect(),
        temperature: request.temperature,
    };
    let canonical = serde_json::to_vec(&input).expect("fingerprint input serializes");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StoreIndex {
    entries: BTreeMap<String, IndexEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    tag: String,
    model: String,
}

/// Fingerprint-addressed response store.
///
/// On disk: `index.json` plus, per entry, `<fp>.txt` (response content) and
/// `<fp>.request.json` (the request, kept so integrity checks can recompute
/// the fingerprint). Writes are serialized through an internal lock.
#[derive(Debug)]
pub struct ReplayStore {
    dir: Option<PathBuf>,
    inner: Mutex<StoreState>,
}

#[derive(Debug, Default)]
struct StoreState {
    index: StoreIndex,
    contents: BTreeMap<String, String>,
}

impl ReplayStore {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            inner: Mutex::new(StoreState::default()),
        }
    }

    /// Opens (or creates) a store directory and loads every entry.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let index_path = dir.join("index.json");
        let index: StoreIndex = if index_path.exists() {
            let raw = fs::read_to_string(&index_path)?;
            serde_json::from_str(&raw)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
        } else {
            StoreIndex::default()
        };
        let mut contents = BTreeMap::new();
        for fp in index.entries.keys() {
            let path = dir.join(format!("{fp}.txt"));
            if let Ok(text) = fs::read_to_string(&path) {
                contents.insert(fp.clone(), text);
            }
        }
        Ok(Self {
            dir: Some(dir),
            inner: Mutex::new(StoreState { index, contents }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, fingerprint: &str) -> Option<String> {
        self.inner.lock().unwrap().contents.get(fingerprint).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, request: &ChatRequest, content: &str) -> Result<String, GatewayError> {
        let fp = fingerprint(request);
        let mut state = self.inner.lock().unwrap();
        state.index.entries.insert(
            fp.clone(),
            IndexEntry {
                tag: request.request_tag.clone(),
                model: request.model_name.clone(),
            },
        );
        state.contents.insert(fp.clone(), content.to_string());
        if let Some(dir) = &self.dir {
            fs::write(dir.join(format!("{fp}.txt")), content)?;
            let req = serde_json::to_string_pretty(request)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            fs::write(dir.join(format!("{fp}.request.json")), req)?;
            let index = serde_json::to_string_pretty(&state.index)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            fs::write(dir.join("index.json"), index + "\n")?;
        }
        Ok(fp)
    }

    pub fn remove(&self, fingerprint: &str) -> Result<bool, GatewayError> {
        let mut state = self.inner.lock().unwrap();
        let existed = state.index.entries.remove(fingerprint).is_some();
        state.contents.remove(fingerprint);
        if let Some(dir) = &self.dir {
            let _ = fs::remove_file(dir.join(format!("{fingerprint}.txt")));
            let _ = fs::remove_file(dir.join(format!("{fingerprint}.request.json")));
            let index = serde_json::to_string_pretty(&state.index)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            fs::write(dir.join("index.json"), index + "\n")?;
        }
        Ok(existed)
    }

    pub fn fingerprints(&self) -> Vec<String> {
        self.inner.lock().unwrap().index.entries.keys().cloned().collect()
    }

    pub fn tag_of(&self, fingerprint: &str) -> Option<String> {
        self.inner
            .lock()
            .unwrap()
            .index
            .entries
            .get(fingerprint)
            .map(|e| e.tag.clone())
    }

    /// Integrity check of an on-disk store. Returns one line per problem.
    pub fn verify(&self) -> Vec<String> {
        let Some(dir) = &self.dir else {
            return Vec::new();
        };
        let state = self.inner.lock().unwrap();
        let mut problems = Vec::new();
        for fp in state.index.entries.keys() {
            match state.contents.get(fp) {
                None => problems.push(format!("{fp}: response file missing")),
                Some(c) if c.trim().is_empty() => {
                    problems.push(format!("{fp}: response is empty"))
                }
                Some(_) => {}
            }
            let req_path = dir.join(format!("{fp}.request.json"));
            match fs::read_to_string(&req_path)
                .ok()
                .and_then(|raw| serde_json::from_str::<ChatRequest>(&raw).ok())
            {
                None => problems.push(format!("{fp}: request file missing or unreadable")),
                Some(req) if fingerprint(&req) != *fp => {
                    problems.push(format!("{fp}: request does not hash to its fingerprint"))
                }
                Some(_) => {}
            }
        }
        if let Ok(rd) = fs::read_dir(dir) {
            for entry in rd.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some(fp) = name.strip_suffix(".txt") {
                    if !state.index.entries.contains_key(fp) {
                        problems.push(format!("{fp}: response file not listed in index"));
                    }
                }
            }
        }
        problems
    }
}

/// Serves responses exclusively from a [`ReplayStore`].
pub struct ReplayModel {
    store: std::sync::Arc<ReplayStore>,
}

impl ReplayModel {
    pub fn new(store: std::sync::Arc<ReplayStore>) -> Self {
        Self { store }
    }
}

impl ChatModel for ReplayModel {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let fp = fingerprint(request);
        match self.store.get(&fp) {
            Some(content) if !content.trim().is_empty() => Ok(ChatResponse {
                content,
                provider: Provider::Replay,
                cache_hit: true,
                latency: 0.0,
            }),
            Some(_) => Err(GatewayError::EmptyCompletion {
                tag: request.request_tag.clone(),
            }),
            None => Err(GatewayError::MissingReplayEntry {
                fingerprint: fp,
                tag: request.request_tag.clone(),
            }),
        }
    }
}

/// Answers from the store when possible, otherwise forwards upstream and
/// persists the new response.
pub struct RecordingModel<M> {
    upstream: M,
    store: std::sync::Arc<ReplayStore>,
}

impl<M: ChatModel> RecordingModel<M> {
    pub fn new(upstream: M, store: std::sync::Arc<ReplayStore>) -> Self {
        Self { upstream, store }
    }
}

impl<M: ChatModel> ChatModel for RecordingModel<M> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let fp = fingerprint(request);
        if let Some(content) = self.store.get(&fp) {
            return Ok(ChatResponse {
                content,
                provider: Provider::Replay,
                cache_hit: true,
                latency: 0.0,
            });
        }
        let response = self.upstream.complete(request)?;
        self.store.insert(request, &response.content)?;
        Ok(response)
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL; requests go to `<base>/chat/completions`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

pub const ENV_ENDPOINT: &str = "EFFIGEN_API_BASE";
pub const ENV_API_KEY: &str = "EFFIGEN_API_KEY";
pub const ENV_MODEL: &str = "EFFIGEN_MODEL";

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            request_timeout: Duration::from_secs(300),
        }
    }

    /// Reads endpoint and credential from the environment. Both are required.
    pub fn from_env() -> Result<Self, GatewayError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| GatewayError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::Config(format!("{ENV_API_KEY} is not set")))?;
        Ok(Self::new(endpoint, Some(key)))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: Option<WireChoiceMessage>,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

/// Blocking chat-completions client with bounded retries on transport
/// failures (connection errors, timeouts, 429 and 5xx).
pub struct LiveClient {
    config: LiveConfig,
    http: reqwest::blocking::Client,
}

enum Attempt {
    Done(String),
    Retryable(String),
    Fatal(String),
}

impl LiveClient {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self { config, http })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Attempt {
        let mut req = self.http.post(self.url()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(e.to_string()),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retryable(format!("HTTP {status}"));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Attempt::Fatal(format!("HTTP {status}: {text}"));
        }
        match resp.text() {
            Ok(text) => Attempt::Done(text),
            Err(e) => Attempt::Retryable(e.to_string()),
        }
    }
}

impl ChatModel for LiveClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = WireRequest {
            model: &request.model_name,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role.as_str(),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
        };
        let started = Instant::now();
        let mut backoff = self.config.initial_backoff;
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for n in 1..=attempts {
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| {
                        GatewayError::TransportError {
                            attempts: n,
                            message: format!("malformed response body: {e}"),
                        }
                    })?;
                    let content = parsed
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message)
                        .and_then(|m| m.content)
                        .unwrap_or_default();
                    if content.trim().is_empty() {
                        return Err(GatewayError::EmptyCompletion {
                            tag: request.request_tag.clone(),
                        });
                    }
                    return Ok(ChatResponse {
                        content,
                        provider: Provider::Live,
                        cache_hit: false,
                        latency: started.elapsed().as_secs_f64(),
                    });
                }
                Attempt::Fatal(message) => {
                    return Err(GatewayError::TransportError {
                        attempts: n,
                        message,
                    })
                }
                Attempt::Retryable(message) => {
                    tracing::warn!(attempt = n, %message, "chat request failed");
                    last = message;
                    if n < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(GatewayError::TransportError {
            attempts,
            message: last,
        })
    }
}
