//! Text-generation providers: the HTTP client, a deterministic synthetic
//! generator, and a record/replay layer keyed by request digest.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::AbstractionLevel;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request rejected with HTTP {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("environment variable '{0}' holding the API token is not set")]
    MissingSecret(String),
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("replay store {path}: {message}")]
    Store { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestKind {
    Story,
    Queries,
}

/// What a generation call is about. Generators that can read structure (the
/// synthetic one) use it; HTTP providers only see the rendered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub kind: RequestKind,
    pub group_id: String,
    /// Every image of the group for stories, the one image for queries.
    pub image_ids: Vec<String>,
    pub context_id: String,
    pub genre: String,
    pub schema_version: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// 1 for the first try, higher for repair prompts.
    pub attempt: u32,
}

/// The wire body of a generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub text: String,
}

/// Hex SHA-256 of the canonical JSON of a wire request.
pub fn request_digest(req: &WireRequest) -> String {
    let json = serde_json::to_vec(req).expect("wire request serializes");
    hex::encode(Sha256::digest(json))
}

pub trait TextGenerator: Send + Sync {
    fn model_id(&self) -> &str;
    fn generate(&self, request: &GenerationRequest, prompt: &str) -> Result<String, GenerationError>;
}

/// Endpoint, model and credentials reference of an HTTP provider. Only the
/// name of the environment variable is kept, never the token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGenDescriptor {
    pub endpoint: String,
    pub model_id: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Requests per minute; `None` means unlimited.
    #[serde(default)]
    pub rate_limit: Option<u32>,
}

/// Client-side token bucket.
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let per_second = f64::from(requests.max(1)) / 60.0;
        Self {
            per_second,
            capacity: 1.0,
            state: Mutex::new((1.0, Instant::now())),
        }
    }

    /// Blocks until a request may be sent.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().expect("rate limiter lock");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_second).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct HttpTextGenerator {
    descriptor: TextGenDescriptor,
    agent: ureq::Agent,
    limiter: Option<RateLimiter>,
    max_attempts: u32,
}

impl HttpTextGenerator {
    pub fn new(descriptor: TextGenDescriptor, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            limiter: descriptor.rate_limit.map(RateLimiter::per_minute),
            descriptor,
            agent,
            max_attempts: 3,
        }
    }

    fn call(&self, body: &WireRequest) -> Result<String, GenerationError> {
        let mut req = self.agent.post(&self.descriptor.endpoint);
        if let Some(var) = &self.descriptor.auth_env {
            let token = std::env::var(var).map_err(|_| GenerationError::MissingSecret(var.clone()))?;
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| GenerationError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 200 {
            let r: WireResponse = resp
                .body_mut()
                .read_json()
                .map_err(|e| GenerationError::Protocol(format!("unreadable response: {e}")))?;
            return Ok(r.text);
        }
        let message = resp.body_mut().read_to_string().unwrap_or_default();
        if status == 429 || status >= 500 {
            Err(GenerationError::Transport(format!("HTTP {status}: {message}")))
        } else {
            Err(GenerationError::Rejected { status, message })
        }
    }
}

impl TextGenerator for HttpTextGenerator {
    fn model_id(&self) -> &str {
        &self.descriptor.model_id
    }

    fn generate(&self, request: &GenerationRequest, prompt: &str) -> Result<String, GenerationError> {
        let body = WireRequest {
            model: self.descriptor.model_id.clone(),
            prompt: prompt.to_string(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            match self.call(&body) {
                Err(GenerationError::Transport(msg)) if attempt < self.max_attempts => {
                    log::warn!("generation attempt {attempt} failed: {msg}");
                    std::thread::sleep(Duration::from_millis(500 << (attempt - 1)));
                }
                other => return other,
            }
        }
    }
}

/// Deterministic canned answers derived from the request structure. Used for
/// fixture datasets, tests and offline smoke runs.
pub struct SyntheticGenerator {
    model_id: String,
}

pub const SYNTHETIC_MODEL_ID: &str = "synthetic-generator-v1";

impl Default for SyntheticGenerator {
    fn default() -> Self {
        Self {
            model_id: SYNTHETIC_MODEL_ID.to_string(),
        }
    }
}

impl SyntheticGenerator {
    fn story(request: &GenerationRequest) -> serde_json::Value {
        let g = request.genre.to_lowercase();
        let c = &request.context_id;
        let scenes: serde_json::Map<String, serde_json::Value> = request
            .image_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), format!("In the {g} story {c}, scene {} turns on {id}.", i + 1).into()))
            .collect();
        serde_json::json!({
            "title": format!("{} of {}", request.genre, request.group_id),
            "synopsis_full": format!("A {g} story plays out across {}. Its people want different things. Their paths cross more than once. The ending settles the matter for {c}.", request.group_id),
            "synopsis_3sent": format!("A {g} story plays out across {}. Its people want different things. The ending settles the matter for {c}.", request.group_id),
            "synopsis_1sent": format!("A {g} story plays out across {}.", request.group_id),
            "scenes": scenes,
        })
    }

    fn queries(request: &GenerationRequest) -> serde_json::Value {
        let img = request.image_ids.first().map(String::as_str).unwrap_or("");
        let g = request.genre.to_lowercase();
        let c = &request.context_id;
        let mut out = serde_json::Map::new();
        for level in AbstractionLevel::ALL {
            let (a, b) = match level {
                AbstractionLevel::L1 => (format!("People and objects in {img}"), format!("someone acts within {c}")),
                AbstractionLevel::L2 => (format!("The focal element of {img}"), format!("it moves the {g} plot of {c}")),
                AbstractionLevel::L3 => (format!("The situation around {img}"), format!("a character pursues a goal in the {g} story {c}")),
                AbstractionLevel::L4 => (format!("The atmosphere of {img}"), format!("the viewer feels the {g} tone of {c}")),
            };
            out.insert(level.as_str().into(), serde_json::json!({"aspect_a": a, "aspect_b": b}));
        }
        serde_json::Value::Object(out)
    }
}

impl TextGenerator for SyntheticGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, request: &GenerationRequest, _prompt: &str) -> Result<String, GenerationError> {
        let v = match request.kind {
            RequestKind::Story => Self::story(request),
            RequestKind::Queries => Self::queries(request),
        };
        Ok(v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayMode {
    /// Serve recorded answers; call through and record on a miss.
    RecordMissing,
    /// Serve recorded answers only; a miss is an error.
    ReplayOnly,
}

#[derive(Serialize, Deserialize)]
struct ReplayRecord {
    digest: String,
    request: WireRequest,
    text: String,
}

/// Stores every answer keyed by the digest of its wire request.
pub struct ReplayGenerator {
    inner: Option<Arc<dyn TextGenerator>>,
    model_id: String,
    mode: ReplayMode,
    path: PathBuf,
    answers: Mutex<HashMap<String, String>>,
    writer: Mutex<BufWriter<File>>,
}

impl ReplayGenerator {
    /// `inner` may be `None` only in `ReplayOnly` mode, in which case
    /// `model_id` names the recorded model.
    pub fn open(
        path: &Path,
        inner: Option<Arc<dyn TextGenerator>>,
        model_id: &str,
        mode: ReplayMode,
    ) -> Result<Self, GenerationError> {
        let fail = |message: String| GenerationError::Store {
            path: path.to_path_buf(),
            message,
        };
        if inner.is_none() && mode == ReplayMode::RecordMissing {
            return Err(fail("recording needs a live generator".into()));
        }
        let mut answers = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| fail(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| fail(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: ReplayRecord = serde_json::from_str(&line).map_err(|e| fail(format!("line {}: {e}", i + 1)))?;
                answers.insert(r.digest, r.text);
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            model_id: inner.as_ref().map_or_else(|| model_id.to_string(), |g| g.model_id().to_string()),
            inner,
            mode,
            path: path.to_path_buf(),
            answers: Mutex::new(answers),
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.answers.lock().expect("replay lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TextGenerator for ReplayGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, request: &GenerationRequest, prompt: &str) -> Result<String, GenerationError> {
        let wire = WireRequest {
            model: self.model_id.clone(),
            prompt: prompt.to_string(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let digest = request_digest(&wire);
        if let Some(text) = self.answers.lock().expect("replay lock").get(&digest) {
            return Ok(text.clone());
        }
        let inner = match (self.mode, &self.inner) {
            (ReplayMode::RecordMissing, Some(inner)) => inner,
            _ => return Err(GenerationError::ReplayMiss(digest)),
        };
        let text = inner.generate(request, prompt)?;
        let record = ReplayRecord {
            digest: digest.clone(),
            request: wire,
            text: text.clone(),
        };
        let mut w = self.writer.lock().expect("replay writer lock");
        let write = serde_json::to_writer(&mut *w, &record)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush());
        write.map_err(|e| GenerationError::Store {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        self.answers.lock().expect("replay lock").insert(digest, text.clone());
        Ok(text)
    }
}
