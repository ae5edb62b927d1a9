use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompt_sha256;
use crate::tideo_data::{read_jsonl_values, CorpusError, JsonlAppender};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    /// Rate or credit limits reached, or no recorded response left. Not retried.
    #[error("client exhausted: {0}")]
    Exhausted(String),
    /// Worth another attempt (timeouts, 5xx).
    #[error("transient client failure: {0}")]
    Transient(String),
    #[error("client failure: {0}")]
    Fatal(String),
    #[error("credentials variable `{0}` is not set")]
    MissingCredentials(String),
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub sampling_seed: u64,
}

pub trait LlmClient: Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, ClientError>;

    /// Whether requests may be issued concurrently without changing results.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// One recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub prompt_sha256: String,
    pub response_text: String,
}

impl FixtureRecord {
    pub fn for_prompt(prompt: &str, response_text: impl Into<String>) -> Self {
        Self { prompt_sha256: prompt_sha256(prompt), response_text: response_text.into() }
    }
}

/// Replays recorded responses. Several records for the same prompt are
/// served in file order, so retries see the next recording.
pub struct FixtureReplayClient {
    queues: Mutex<HashMap<String, VecDeque<String>>>,
}

impl FixtureReplayClient {
    pub fn new(records: impl IntoIterator<Item = FixtureRecord>) -> Self {
        let mut queues: HashMap<String, VecDeque<String>> = HashMap::new();
        for r in records {
            queues.entry(r.prompt_sha256).or_default().push_back(r.response_text);
        }
        Self { queues: Mutex::new(queues) }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        for (line, v) in read_jsonl_values(path)? {
            let r: FixtureRecord = serde_json::from_value(v)
                .map_err(|source| CorpusError::Json { path: path.to_path_buf(), line, source })?;
            records.push(r);
        }
        Ok(Self::new(records))
    }

    pub fn save(records: &[FixtureRecord], path: &Path) -> Result<(), CorpusError> {
        let _ = std::fs::remove_file(path);
        let mut w = JsonlAppender::open(path)?;
        for r in records {
            w.append(r)?;
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.queues.lock().expect("fixture lock").values().map(VecDeque::len).sum()
    }
}

impl LlmClient for FixtureReplayClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, ClientError> {
        let key = prompt_sha256(&request.prompt);
        let mut queues = self.queues.lock().expect("fixture lock");
        queues
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| ClientError::Exhausted(format!("no recorded response left for prompt {key}")))
    }

    fn concurrent_safe(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    /// URL of an OpenAI-compatible chat completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub requests_per_minute: f64,
    /// Name of the environment variable holding the API key.
    pub credentials_env: String,
    pub max_in_flight: usize,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 60,
            max_retries: 2,
            requests_per_minute: 60.0,
            credentials_env: "TOPA_LLM_API_KEY".into(),
            max_in_flight: 4,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(self.requests_per_minute > 0.0) {
            return Err(ClientError::InvalidConfig("requests_per_minute must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ClientError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Token bucket that refills continuously at `rate_per_sec` up to `capacity`.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    rate_per_sec: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(capacity: f64, rate_per_sec: f64) -> Self {
        Self { capacity, rate_per_sec, tokens: capacity, last: Instant::now() }
    }

    fn refill(&mut self, now: Instant) {
        let dt = now.saturating_duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + dt * self.rate_per_sec).min(self.capacity);
        self.last = now;
    }

    /// Takes a token if one is available, else returns the wait until one is.
    pub fn try_take(&mut self, now: Instant) -> Result<(), Duration> {
        self.refill(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - self.tokens) / self.rate_per_sec))
        }
    }
}

/// Live client for an OpenAI-compatible chat completions endpoint.
pub struct HttpClient {
    config: LlmClientConfig,
    api_key: String,
    agent: ureq::Agent,
    bucket: Mutex<TokenBucket>,
}

impl HttpClient {
    /// Fails before any request is made when the credentials are missing.
    pub fn from_config(config: LlmClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        if config.endpoint.is_empty() {
            return Err(ClientError::InvalidConfig("endpoint is empty".into()));
        }
        let api_key = std::env::var(&config.credentials_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ClientError::MissingCredentials(config.credentials_env.clone()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let burst = config.max_in_flight as f64;
        let bucket = Mutex::new(TokenBucket::new(burst, config.requests_per_minute / 60.0));
        Ok(Self { config, api_key, agent, bucket })
    }

    fn wait_for_token(&self) {
        loop {
            let wait = match self.bucket.lock().expect("bucket lock").try_take(Instant::now()) {
                Ok(()) => return,
                Err(wait) => wait,
            };
            std::thread::sleep(wait);
        }
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, ClientError> {
        self.wait_for_token();
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "seed": request.sampling_seed,
        });
        if let Some(t) = request.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = request.max_output_tokens {
            body["max_tokens"] = json!(m);
        }
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed => {
                    ClientError::Transient(e.to_string())
                }
                other => ClientError::Fatal(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            402 | 429 => return Err(ClientError::Exhausted(format!("HTTP {status}"))),
            500..=599 => return Err(ClientError::Transient(format!("HTTP {status}"))),
            _ => return Err(ClientError::Fatal(format!("HTTP {status}"))),
        }
        let v: Value = resp.body_mut().read_json().map_err(|e| ClientError::Transient(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Fatal("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str) -> LlmRequest {
        LlmRequest { prompt: prompt.into(), temperature: None, max_output_tokens: None, sampling_seed: 0 }
    }

    #[test]
    fn replay_serves_recordings_in_order() {
        let c = FixtureReplayClient::new([
            FixtureRecord::for_prompt("p", "one"),
            FixtureRecord::for_prompt("q", "other"),
            FixtureRecord::for_prompt("p", "two"),
        ]);
        assert_eq!(c.complete(&req("p")).unwrap(), "one");
        assert_eq!(c.complete(&req("p")).unwrap(), "two");
        assert!(matches!(c.complete(&req("p")), Err(ClientError::Exhausted(_))));
        assert_eq!(c.remaining(), 1);
    }

    #[test]
    fn missing_credentials_fail_at_startup() {
        let config = LlmClientConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            credentials_env: "TOPA_TEST_SURELY_UNSET_KEY".into(),
            ..Default::default()
        };
        assert!(matches!(HttpClient::from_config(config), Err(ClientError::MissingCredentials(_))));
    }

    #[test]
    fn token_bucket_limits_bursts() {
        let t0 = Instant::now();
        let mut b = TokenBucket::new(2.0, 1.0);
        assert!(b.try_take(t0).is_ok());
        assert!(b.try_take(t0).is_ok());
        let wait = b.try_take(t0).unwrap_err();
        assert!((wait.as_secs_f64() - 1.0).abs() < 1e-6);
        assert!(b.try_take(t0 + Duration::from_millis(1500)).is_ok());
    }
}
