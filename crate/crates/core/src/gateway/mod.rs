//! The single boundary to all generative-model calls.
//!
//! Every agent in the system talks to a [`Gateway`], which routes each
//! [`ChatRequest`] to a live HTTP backend, a deterministic replay of
//! recorded fixtures, or a scripted responder, and appends every exchange to
//! the run transcript. Record and hybrid modes write fixtures as a side
//! effect so any live run can later be replayed offline, byte for byte.

pub mod fixtures;
pub mod http;
pub mod scripted;
pub mod verdict;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use fixtures::{FixtureRecorder, FixtureStore, ReplaySession};
use http::{AttemptError, HttpChatBackend};

/// Which agent role a request belongs to; part of the fixture match key and
/// recorded in transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Moderator,
    Community,
    QueryGen,
    Baseline,
    Fusion,
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Tag::Moderator => "moderator",
            Tag::Community => "community",
            Tag::QueryGen => "query_gen",
            Tag::Baseline => "baseline",
            Tag::Fusion => "fusion",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

/// A chat-completion request. Turns must be non-empty and end with a user
/// turn.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub model_id: String,
    pub tag: Tag,
}

impl ChatRequest {
    pub fn new(
        system_prompt: impl Into<String>,
        user_text: impl Into<String>,
        temperature: f64,
        model_id: impl Into<String>,
        tag: Tag,
    ) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            turns: vec![Turn {
                role: Role::User,
                content: user_text.into(),
            }],
            temperature,
            model_id: model_id.into(),
            tag,
        }
    }

    pub fn push_turn(&mut self, role: Role, content: impl Into<String>) {
        self.turns.push(Turn {
            role,
            content: content.into(),
        });
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.turns.is_empty() {
            return Err(GatewayError::InvalidRequest("empty turn list".into()));
        }
        if self.turns.last().map(|t| t.role) != Some(Role::User) {
            return Err(GatewayError::InvalidRequest(
                "last turn must be a user turn".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite non-negative value, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Which route actually produced a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub backend: BackendKind,
    pub latency_ms: u64,
    /// Digest of the normalized prompt; doubles as the transcript reference.
    pub prompt_sha256: String,
}

/// One line of the run transcript.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TranscriptRecord {
    pub timestamp: String,
    pub tag: Tag,
    pub model_id: String,
    pub prompt_sha256: String,
    pub prompt_text: String,
    pub response_text: String,
    pub backend: BackendKind,
    pub latency_ms: u64,
}

/// Timestamp- and latency-free view of a transcript record, used when
/// comparing transcripts across runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProjectedCall {
    pub tag: Tag,
    pub model_id: String,
    pub prompt_sha256: String,
    pub prompt_text: String,
    pub response_text: String,
    pub backend: BackendKind,
}

/// Projects a transcript for comparison: drops timing fields and sorts, so
/// that two runs over the same fixtures compare equal regardless of how the
/// scheduler interleaved their calls.
pub fn transcript_projection(records: &[TranscriptRecord]) -> Vec<ProjectedCall> {
    let mut projected: Vec<ProjectedCall> = records
        .iter()
        .map(|r| ProjectedCall {
            tag: r.tag,
            model_id: r.model_id.clone(),
            prompt_sha256: r.prompt_sha256.clone(),
            prompt_text: r.prompt_text.clone(),
            response_text: r.response_text.clone(),
            backend: r.backend,
        })
        .collect();
    projected.sort();
    projected
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("fixture miss: tag {tag}, prompt digest {digest}, ordinal {ordinal}")]
    FixtureMiss {
        tag: Tag,
        digest: String,
        ordinal: u32,
    },
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("gateway configuration error: {0}")]
    Config(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Parse(#[from] verdict::ParseError),
}

/// Retry, pacing, and concurrency limits for live calls.
#[derive(Debug, Clone)]
pub struct GatewayLimits {
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    /// Minimum spacing between live requests; 0 disables pacing.
    pub rate_interval_ms: u64,
    pub max_inflight: usize,
}

impl Default for GatewayLimits {
    fn default() -> Self {
        Self {
            retry_attempts: 3,
            retry_base_ms: 500,
            rate_interval_ms: 200,
            max_inflight: 4,
        }
    }
}

/// A responder that plays the model's part deterministically; used by tests
/// and by the bundled fixture generator.
pub trait ScriptedResponder: Send + Sync {
    fn respond(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

enum LiveClient {
    Http(HttpChatBackend),
    Scripted(Box<dyn ScriptedResponder>),
}

impl std::fmt::Debug for LiveClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LiveClient::Http(_) => f.write_str("LiveClient::Http"),
            LiveClient::Scripted(_) => f.write_str("LiveClient::Scripted"),
        }
    }
}

/// Shared entry point for all model calls. Safe for concurrent callers.
#[derive(Debug)]
pub struct Gateway {
    replay: Option<ReplaySession>,
    client: Option<LiveClient>,
    recorder: Option<FixtureRecorder>,
    limits: GatewayLimits,
    pacer: Mutex<Instant>,
    inflight: InflightGate,
    transcript: Mutex<Vec<TranscriptRecord>>,
}

impl Gateway {
    /// Replay-only gateway: every request must hit a fixture.
    pub fn replay(store: FixtureStore) -> Self {
        Self::assemble(Some(ReplaySession::new(store)), None, None, GatewayLimits::default())
    }

    pub fn replay_file(path: &Path) -> Result<Self, GatewayError> {
        Ok(Self::replay(FixtureStore::load(path)?))
    }

    /// Live gateway against an OpenAI-compatible endpoint.
    pub fn live(base_url: &str, timeout_s: u64, limits: GatewayLimits) -> Result<Self, GatewayError> {
        let client = HttpChatBackend::new(base_url, timeout_s)?;
        Ok(Self::assemble(None, Some(LiveClient::Http(client)), None, limits))
    }

    /// Live gateway that also records every exchange to `fixture_path`.
    pub fn record_live(
        base_url: &str,
        timeout_s: u64,
        limits: GatewayLimits,
        fixture_path: &Path,
    ) -> Result<Self, GatewayError> {
        let client = HttpChatBackend::new(base_url, timeout_s)?;
        let recorder = FixtureRecorder::open(fixture_path)?;
        Ok(Self::assemble(None, Some(LiveClient::Http(client)), Some(recorder), limits))
    }

    /// Hybrid: replay when a fixture exists, otherwise go live and record.
    pub fn hybrid(
        store: FixtureStore,
        base_url: &str,
        timeout_s: u64,
        limits: GatewayLimits,
        fixture_path: &Path,
    ) -> Result<Self, GatewayError> {
        let client = HttpChatBackend::new(base_url, timeout_s)?;
        let recorder = FixtureRecorder::open(fixture_path)?;
        Ok(Self::assemble(
            Some(ReplaySession::new(store)),
            Some(LiveClient::Http(client)),
            Some(recorder),
            limits,
        ))
    }

    /// Deterministic scripted gateway (no network).
    pub fn scripted(responder: Box<dyn ScriptedResponder>) -> Self {
        Self::assemble(None, Some(LiveClient::Scripted(responder)), None, GatewayLimits::default())
    }

    /// Scripted gateway that records its exchanges; used to build fixture
    /// packs that replay-mode runs can consume.
    pub fn record_scripted(
        responder: Box<dyn ScriptedResponder>,
        fixture_path: &Path,
    ) -> Result<Self, GatewayError> {
        let recorder = FixtureRecorder::open(fixture_path)?;
        Ok(Self::assemble(
            None,
            Some(LiveClient::Scripted(responder)),
            Some(recorder),
            GatewayLimits::default(),
        ))
    }

    fn assemble(
        replay: Option<ReplaySession>,
        client: Option<LiveClient>,
        recorder: Option<FixtureRecorder>,
        limits: GatewayLimits,
    ) -> Self {
        let max_inflight = limits.max_inflight.max(1);
        Self {
            replay,
            client,
            recorder,
            limits,
            pacer: Mutex::new(Instant::now()),
            inflight: InflightGate::new(max_inflight),
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Sends one chat request through the configured route and appends the
    /// exchange to the transcript.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let prompt_text = normalized_prompt(req);
        let digest = sha256_hex(&prompt_text);

        let started = Instant::now();
        let outcome = self.route(req, &digest);
        let latency_ms = started.elapsed().as_millis() as u64;

        let (text, backend) = outcome?;
        if let Some(recorder) = &self.recorder {
            if backend != BackendKind::Replay {
                recorder.append(req.tag, &digest, &text)?;
            }
        }

        let record = TranscriptRecord {
            timestamp: chrono::Utc::now().to_rfc3339(),
            tag: req.tag,
            model_id: req.model_id.clone(),
            prompt_sha256: digest.clone(),
            prompt_text,
            response_text: text.clone(),
            backend,
            latency_ms,
        };
        self.transcript
            .lock()
            .expect("transcript poisoned")
            .push(record);

        Ok(ChatResponse {
            text,
            backend,
            latency_ms,
            prompt_sha256: digest,
        })
    }

    fn route(&self, req: &ChatRequest, digest: &str) -> Result<(String, BackendKind), GatewayError> {
        if let Some(replay) = &self.replay {
            match replay.next(req.tag, digest) {
                Ok(text) => return Ok((text, BackendKind::Replay)),
                Err(miss) => {
                    if self.client.is_none() {
                        return Err(miss);
                    }
                }
            }
        }
        match &self.client {
            Some(LiveClient::Scripted(responder)) => {
                Ok((responder.respond(req)?, BackendKind::Scripted))
            }
            Some(LiveClient::Http(http)) => {
                let _slot = self.inflight.acquire();
                let text = self.call_with_retries(http, req)?;
                Ok((text, BackendKind::Live))
            }
            None => Err(GatewayError::Config(
                "gateway has neither fixtures nor a backend".into(),
            )),
        }
    }

    fn call_with_retries(
        &self,
        http: &HttpChatBackend,
        req: &ChatRequest,
    ) -> Result<String, GatewayError> {
        let attempts = self.limits.retry_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            self.pace();
            match http.attempt(req) {
                Ok(text) => return Ok(text),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(msg)) => {
                    log::warn!("attempt {}/{attempts} failed: {msg}", attempt + 1);
                    last_error = msg;
                    if attempt + 1 < attempts {
                        let backoff = self.limits.retry_base_ms.saturating_mul(1 << attempt);
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
            }
        }
        Err(GatewayError::BackendUnavailable {
            attempts,
            last_error,
        })
    }

    /// Token-bucket pacing for live calls: reserves the next free slot and
    /// sleeps until it arrives.
    fn pace(&self) {
        if self.limits.rate_interval_ms == 0 {
            return;
        }
        let interval = Duration::from_millis(self.limits.rate_interval_ms);
        let wait_until = {
            let mut next_free = self.pacer.lock().expect("pacer poisoned");
            let now = Instant::now();
            let slot = (*next_free).max(now);
            *next_free = slot + interval;
            slot
        };
        let now = Instant::now();
        if wait_until > now {
            std::thread::sleep(wait_until - now);
        }
    }

    /// Snapshot of every exchange so far, in call-completion order.
    pub fn transcript_snapshot(&self) -> Vec<TranscriptRecord> {
        self.transcript.lock().expect("transcript poisoned").clone()
    }
}

/// Canonical prompt text hashed for fixture matching: system prompt and
/// turns concatenated with role markers, line endings normalized and
/// trailing whitespace stripped.
pub fn normalized_prompt(req: &ChatRequest) -> String {
    let mut out = String::new();
    out.push_str("system:\n");
    push_normalized(&mut out, &req.system_prompt);
    for turn in &req.turns {
        out.push_str(match turn.role {
            Role::User => "user:\n",
            Role::Assistant => "assistant:\n",
        });
        push_normalized(&mut out, &turn.content);
    }
    out
}

fn push_normalized(out: &mut String, text: &str) {
    for line in text.lines() {
        out.push_str(line.trim_end());
        out.push('\n');
    }
}

pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

/// Counting semaphore bounding concurrent live requests.
#[derive(Debug)]
struct InflightGate {
    state: Mutex<usize>,
    cond: Condvar,
}

struct InflightSlot<'a>(&'a InflightGate);

impl InflightGate {
    fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(capacity),
            cond: Condvar::new(),
        }
    }

    fn acquire(&self) -> InflightSlot<'_> {
        let mut free = self.state.lock().expect("inflight gate poisoned");
        while *free == 0 {
            free = self.cond.wait(free).expect("inflight gate poisoned");
        }
        *free -= 1;
        InflightSlot(self)
    }
}

impl Drop for InflightSlot<'_> {
    fn drop(&mut self) {
        let mut free = self.0.state.lock().expect("inflight gate poisoned");
        *free += 1;
        self.0.cond.notify_one();
    }
}

/// Convenience used by tests and fixture tooling: builds a fixture entry
/// matching what `complete` would look up for `req`.
pub fn fixture_entry_for(req: &ChatRequest, ordinal: u32, response_text: &str) -> fixtures::FixtureEntry {
    fixtures::FixtureEntry {
        tag: req.tag,
        prompt_sha256: sha256_hex(&normalized_prompt(req)),
        ordinal,
        response_text: response_text.to_string(),
    }
}

/// Per-key ordinal assignment for a batch of requests, mirroring recorder
/// behavior; used when tests construct fixture stores by hand.
#[derive(Debug, Default)]
pub struct FixtureBuilder {
    entries: Vec<fixtures::FixtureEntry>,
    counters: HashMap<(Tag, String), u32>,
}

impl FixtureBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, req: &ChatRequest, response_text: &str) -> &mut Self {
        let digest = sha256_hex(&normalized_prompt(req));
        let key = (req.tag, digest.clone());
        let ordinal = *self.counters.get(&key).unwrap_or(&0);
        self.counters.insert(key, ordinal + 1);
        self.entries.push(fixtures::FixtureEntry {
            tag: req.tag,
            prompt_sha256: digest,
            ordinal,
            response_text: response_text.to_string(),
        });
        self
    }

    pub fn build(self) -> FixtureStore {
        FixtureStore::from_entries(self.entries)
    }
}
