//! Completion backends standing in for the teacher model.
//!
//! [`Teacher`] is the shareable handle: it validates requests, bounds the
//! number of in-flight requests, retries transient failures with exponential
//! backoff and strips stop strings. The transports behind it are an
//! OpenAI-compatible HTTP client and three deterministic mocks.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskKind;
use crate::prompting::{Mode, INPUT_TAG};

pub use http::HttpBackend;
pub use mock::{EchoBackend, LookupBackend, ScriptedBackend};

pub const ANNOTATE_TEMPERATURE: f64 = 0.1;
pub const GENERATE_TEMPERATURE: f64 = 0.8;

/// Sampling temperature used when a plan does not override it.
pub fn default_temperature(mode: Mode) -> f64 {
    match mode {
        Mode::Annotate => ANNOTATE_TEMPERATURE,
        Mode::Generate => GENERATE_TEMPERATURE,
    }
}

pub fn default_max_tokens(kind: TaskKind) -> u32 {
    match kind {
        TaskKind::Classification => 64,
        TaskKind::Generation => 256,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("backend rejected the request (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("lookup table has no entry for {0:?}")]
    LookupMiss(String),
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

/// Failure of one transport attempt, before retry policy is applied.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    Transient(String),
    Fatal(BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub request_id: String,
    /// Sampling seed; bumped per resample so retries can differ.
    pub seed: u64,
    pub job_index: u64,
    pub attempt: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            temperature,
            max_tokens: 64,
            stop: vec![INPUT_TAG.to_string()],
            request_id: String::new(),
            seed: 0,
            job_index: 0,
            attempt: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.stop.is_empty() || self.stop.iter().any(|s| s.is_empty()) {
            return Err(BackendError::InvalidRequest("stop list must hold non-empty strings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    MockLookup,
    MockEcho,
    MockScripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_backoff_ms: 500,
            backoff_multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Sleep before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.base_backoff_ms as f64 * self.backoff_multiplier.powi(retry.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(600_000.0) as u64)
    }
}

fn default_parallelism() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<String>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Inline lookup table for `mock-lookup`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookup: Option<BTreeMap<String, String>>,
    /// JSONL file of labeled records for `mock-lookup`, resolved against the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookup_path: Option<PathBuf>,
    /// Completions for `mock-scripted`, chosen by `(job_index + attempt) % len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<String>>,
    /// Jobs for which `mock-scripted` reports a transient failure.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fail_jobs: Vec<u64>,
    /// Artificial per-request latency for mocks.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub mock_delay_ms: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl BackendConfig {
    pub fn mock(kind: BackendKind, model_name: &str) -> Self {
        Self {
            kind,
            endpoint: None,
            model_name: model_name.to_string(),
            auth: None,
            parallelism: default_parallelism(),
            retry: RetryPolicy::default(),
            timeout_secs: default_timeout(),
            lookup: None,
            lookup_path: None,
            script: None,
            fail_jobs: Vec::new(),
            mock_delay_ms: 0,
        }
    }

    pub fn http(endpoint: &str, model_name: &str) -> Self {
        Self {
            endpoint: Some(endpoint.to_string()),
            ..Self::mock(BackendKind::Http, model_name)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.parallelism == 0 {
            return Err(BackendError::Config("parallelism must be >= 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be >= 1".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => {
                Err(BackendError::Config("http backend needs an endpoint".into()))
            }
            BackendKind::MockLookup if self.lookup.is_none() && self.lookup_path.is_none() => {
                Err(BackendError::Config("mock-lookup needs lookup or lookup_path".into()))
            }
            BackendKind::MockScripted if self.script.as_ref().is_none_or(|s| s.is_empty()) => {
                Err(BackendError::Config("mock-scripted needs a non-empty script".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One transport. Implementations make a single attempt; retries are the
/// caller's business.
pub trait CompletionBackend: Send + Sync {
    fn attempt(&self, req: &CompletionRequest) -> Result<String, AttemptError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub request_id: String,
    pub prompt_chars: usize,
    pub completion_chars: usize,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub attempts: u32,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: UsageRecord,
}

/// Truncates at the earliest occurrence of any stop string.
pub fn strip_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
    peak: AtomicUsize,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Shareable teacher handle. Safe to call from any number of threads; at
/// most `parallelism` requests are in flight at once.
pub struct Teacher {
    config: BackendConfig,
    transport: Box<dyn CompletionBackend>,
    limiter: Limiter,
}

impl Teacher {
    /// Builds the transport named by `config`. Relative lookup paths are
    /// resolved against `base_dir`.
    pub fn from_config(config: &BackendConfig, base_dir: &Path) -> Result<Self, BackendError> {
        config.validate()?;
        let transport: Box<dyn CompletionBackend> = match config.kind {
            BackendKind::Http => Box::new(HttpBackend::new(config)?),
            BackendKind::MockEcho => Box::new(EchoBackend::new(config.mock_delay_ms)),
            BackendKind::MockLookup => Box::new(LookupBackend::from_config(config, base_dir)?),
            BackendKind::MockScripted => Box::new(ScriptedBackend::from_config(config)),
        };
        Ok(Self::with_transport(config.clone(), transport))
    }

    pub fn with_transport(config: BackendConfig, transport: Box<dyn CompletionBackend>) -> Self {
        let cap = config.parallelism.max(1);
        Self {
            config,
            transport,
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                cap,
                peak: AtomicUsize::new(0),
            },
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn model_name(&self) -> &str {
        &self.config.model_name
    }

    pub fn parallelism(&self) -> usize {
        self.limiter.cap
    }

    /// Highest number of simultaneously in-flight requests observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak.load(Ordering::SeqCst)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let retry = &self.config.retry;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = {
                let _slot = self.limiter.acquire();
                self.transport.attempt(req)
            };
            match result {
                Ok(raw) => {
                    let text = strip_stop(&raw, &req.stop);
                    return Ok(Completion {
                        usage: UsageRecord {
                            request_id: req.request_id.clone(),
                            prompt_chars: req.prompt.chars().count(),
                            completion_chars: text.chars().count(),
                            latency: started.elapsed(),
                            attempts,
                        },
                        text,
                    });
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(msg)) => {
                    if attempts >= retry.max_attempts {
                        return Err(BackendError::Unavailable {
                            attempts,
                            last_error: msg,
                        });
                    }
                    log::debug!("request {} attempt {attempts} failed: {msg}", req.request_id);
                    std::thread::sleep(retry.backoff(attempts));
                }
            }
        }
    }
}

/// One-shot completion against a freshly built backend.
pub fn complete(config: &BackendConfig, req: &CompletionRequest) -> Result<Completion, BackendError> {
    Teacher::from_config(config, Path::new("."))?.complete(req)
}
