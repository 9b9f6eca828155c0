//! Chat-completions HTTP backend.
//!
//! Posts `{model, messages, temperature}` to `{endpoint}/chat/completions` and
//! returns `choices[0].message.content`. Timeouts, connection failures, 429
//! and 5xx responses are retried with exponential backoff and full jitter;
//! other HTTP errors fail at once.

use std::env;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use iterchat_core::backend::check_messages;
use iterchat_core::{BackendError, ChatMessage, GenerationBackend};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const ENV_API_BASE: &str = "ITERCHAT_API_BASE";
pub const ENV_API_KEY: &str = "ITERCHAT_API_KEY";
pub const ENV_MODEL: &str = "ITERCHAT_MODEL";

/// Longest body excerpt carried in errors.
const EXCERPT: usize = 512;
const MAX_BACKOFF_SECS: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// API base such as `https://host/v1`; a full `.../chat/completions`
    /// URL is used as given.
    pub endpoint_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token. Unset means no
    /// `Authorization` header.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub backoff_base_secs: f64,
    /// Cap on concurrent requests through one backend.
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_id: String::new(),
            api_key_env: ENV_API_KEY.to_string(),
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
            backoff_base_secs: 0.5,
            max_in_flight: 4,
        }
    }
}

impl BackendConfig {
    /// Defaults with endpoint and model taken from the environment.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Ok(base) = env::var(ENV_API_BASE) {
            config.endpoint_url = base;
        }
        if let Ok(model) = env::var(ENV_MODEL) {
            config.model_id = model;
        }
        config
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.endpoint_url.trim().is_empty() {
            return fail("endpoint_url is empty (set ITERCHAT_API_BASE)");
        }
        if self.model_id.trim().is_empty() {
            return fail("model_id is empty (set ITERCHAT_MODEL)");
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return fail("timeout must be positive");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return fail("temperature must be in [0, 2]");
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_base_secs.is_finite()) {
            return fail("backoff base must be non-negative");
        }
        if self.max_in_flight == 0 {
            return fail("max_in_flight must be at least 1");
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        let base = self.endpoint_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    available: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.available.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.available.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    slots: Slots,
}

enum Attempt {
    Done(String),
    Transient(String),
    Fatal(BackendError),
}

fn excerpt(body: &str) -> String {
    match body.char_indices().nth(EXCERPT) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// `choices[0].message.content` of a completion response body.
pub fn parse_completion(body: &str) -> Result<String, BackendError> {
    let protocol = |reason: &str| BackendError::Protocol { reason: reason.to_string(), body: excerpt(body) };
    let value: Value = serde_json::from_str(body).map_err(|_| protocol("body is not JSON"))?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| protocol("missing choices[0].message.content"))?
        .as_str()
        .ok_or_else(|| protocol("content is not a string"))?;
    if content.is_empty() {
        return Err(protocol("content is empty"));
    }
    Ok(content.to_string())
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = env::var(&config.api_key_env).ok().filter(|k| !k.trim().is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let slots = Slots { free: Mutex::new(config.max_in_flight), available: Condvar::new() };
        Ok(Self { config, api_key, client, slots })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn attempt(&self, payload: &Value) -> Attempt {
        let mut request = self.client.post(self.config.completions_url()).json(payload);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() => return Attempt::Transient(e.to_string()),
            Err(e) => return Attempt::Fatal(BackendError::Transport(e.to_string())),
        };
        let status = response.status();
        let body = match response.text() {
            Ok(b) => b,
            Err(e) if e.is_timeout() => return Attempt::Transient(e.to_string()),
            Err(e) => return Attempt::Fatal(BackendError::Transport(e.to_string())),
        };
        if status.is_success() {
            return match parse_completion(&body) {
                Ok(text) => Attempt::Done(text),
                Err(e) => Attempt::Fatal(e),
            };
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Transient(format!("HTTP {}: {}", status.as_u16(), excerpt(&body)));
        }
        Attempt::Fatal(BackendError::Http { status: status.as_u16(), body: excerpt(&body) })
    }

    fn backoff(&self, retry: u32) -> Duration {
        let cap = (self.config.backoff_base_secs * 2f64.powi(retry as i32)).min(MAX_BACKOFF_SECS);
        if cap <= 0.0 {
            return Duration::ZERO;
        }
        Duration::from_secs_f64(rand::rng().random_range(0.0..=cap))
    }
}

impl GenerationBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        check_messages(messages)?;
        let payload = json!({
            "model": self.config.model_id,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let _slot = self.slots.acquire();
        let attempts = self.config.max_retries + 1;
        for attempt in 1..=attempts {
            match self.attempt(&payload) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(last) if attempt == attempts => {
                    return Err(BackendError::RetriesExhausted { attempts, last });
                }
                Attempt::Transient(last) => {
                    log::warn!("attempt {attempt}/{attempts} failed: {last}");
                    std::thread::sleep(self.backoff(attempt - 1));
                }
            }
        }
        unreachable!("loop returns on the last attempt")
    }
}
