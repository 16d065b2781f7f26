//! Completion gateway over an HTTP chat-completions endpoint or a scripted
//! response file.
//!
//! Every call that passes through [`Gateway`] is appended to the run
//! transcript. Credentials live only inside [`HttpProvider`] and are never
//! written to the transcript or to `Debug` output.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("provider unavailable after {attempts} attempts: {last_error}")]
    ProviderUnavailable { attempts: u32, last_error: String },
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("script exhausted: no unused entry matches tag `{tag}`")]
    ScriptUnderrun { tag: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("transcript write failed: {0}")]
    Transcript(#[from] std::io::Error),
}

impl GatewayError {
    /// Errors that should stop an experiment rather than just fail one run.
    pub fn is_outage(&self) -> bool {
        matches!(self, GatewayError::ProviderUnavailable { .. } | GatewayError::Rejected(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub provider_id: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

pub trait CompletionProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

/// One scripted response and the tags it may answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Regular expression searched for in the request tag.
    pub tag_pattern: String,
    pub response_text: String,
}

pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, GatewayError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::Config(format!("cannot read script {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("bad script {}: {e}", path.display())))
}

/// Answers each request with the first unused entry whose pattern matches the
/// request tag.
pub struct ScriptedProvider {
    entries: Vec<(Regex, String)>,
    used: Mutex<Vec<bool>>,
}

impl ScriptedProvider {
    pub fn new(entries: &[ScriptEntry]) -> Result<Self, GatewayError> {
        let entries = entries
            .iter()
            .map(|e| {
                Regex::new(&e.tag_pattern)
                    .map(|re| (re, e.response_text.clone()))
                    .map_err(|err| GatewayError::Config(format!("bad tag pattern `{}`: {err}", e.tag_pattern)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let used = Mutex::new(vec![false; entries.len()]);
        Ok(Self { entries, used })
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        Self::new(&load_script(path)?)
    }

    pub fn remaining(&self) -> usize {
        self.used.lock().unwrap().iter().filter(|u| !**u).count()
    }
}

impl CompletionProvider for ScriptedProvider {
    fn provider_id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let started = Instant::now();
        let mut used = self.used.lock().unwrap();
        let hit = self
            .entries
            .iter()
            .enumerate()
            .find(|(i, (re, _))| !used[*i] && re.is_match(&request.request_tag));
        match hit {
            Some((i, (_, text))) => {
                used[i] = true;
                Ok(CompletionResult {
                    text: text.clone(),
                    provider_id: self.provider_id().to_string(),
                    latency: started.elapsed(),
                    attempt_count: 1,
                })
            }
            None => Err(GatewayError::ScriptUnderrun {
                tag: request.request_tag.clone(),
            }),
        }
    }
}

#[derive(Debug)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    Transient(String),
    Permanent(String),
}

/// Sends one JSON POST; split out so retries can be exercised without a network.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| TransportError::Transient(format!("request failed: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(format!("reading body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| TransportError::Permanent(format!("response is not JSON: {e}"))),
            429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => Err(TransportError::Permanent(format!("HTTP {status}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 16_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the initial backoff.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// OpenAI-style chat-completions client.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    transport: Box<dyn Transport>,
    id: String,
}

impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry", &self.retry)
            .finish()
    }
}

impl HttpProvider {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        transport: Box<dyn Transport>,
    ) -> Self {
        let model = model.into();
        Self {
            endpoint: endpoint.into(),
            id: format!("http:{model}"),
            model,
            api_key,
            retry,
            transport,
        }
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }
}

fn response_text(v: &serde_json::Value) -> Option<String> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/choices/0/text"))
        .and_then(|t| t.as_str())
        .map(str::to_string)
}

impl CompletionProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let started = Instant::now();
        let body = self.body(request);
        let max = self.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max {
            match self.transport.post_json(&self.endpoint, self.api_key.as_deref(), &body) {
                Ok(v) => {
                    let text = response_text(&v)
                        .ok_or_else(|| GatewayError::Rejected("response has no completion text".into()))?;
                    return Ok(CompletionResult {
                        text,
                        provider_id: self.id.clone(),
                        latency: started.elapsed(),
                        attempt_count: attempt,
                    });
                }
                Err(TransportError::Permanent(e)) => return Err(GatewayError::Rejected(e)),
                Err(TransportError::Transient(e)) => {
                    log::warn!("{} attempt {attempt}/{max} failed: {e}", self.id);
                    last_error = e;
                    if attempt < max {
                        std::thread::sleep(self.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(GatewayError::ProviderUnavailable {
            attempts: max,
            last_error,
        })
    }
}

/// Append-only JSON-lines log of everything a run sends and receives.
pub struct Transcript {
    out: Mutex<BufWriter<File>>,
}

impl Transcript {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn record<T: Serialize>(&self, event: &T) -> std::io::Result<()> {
        let line = serde_json::to_string(event)?;
        let mut out = self.out.lock().unwrap();
        writeln!(out, "{line}")?;
        out.flush()
    }
}

/// One line of the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Completion {
        tag: String,
        provider_id: String,
        prompt: String,
        response: Option<String>,
        error: Option<String>,
        attempt_count: u32,
    },
    Validation {
        generation: usize,
        candidate: usize,
        expression: Option<String>,
        report: crate::reward_dsl::ValidationReport,
    },
    Choice {
        generation: usize,
        chosen_index: Option<usize>,
        method: String,
    },
}

/// Concurrency cap plus a minimum spacing between request starts.
struct Limiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    min_interval: Duration,
    last_start: Mutex<Option<Instant>>,
}

impl Limiter {
    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        let mut last = self.last_start.lock().unwrap();
        if let Some(t) = *last {
            let wait = self.min_interval.saturating_sub(t.elapsed());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        *last = Some(Instant::now());
    }

    fn release(&self) {
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
    }
}

/// Provider plus rate limits, with an optional per-run transcript. Forks
/// share the provider and the limits.
pub struct Gateway {
    provider: Arc<dyn CompletionProvider>,
    limiter: Arc<Limiter>,
    transcript: Option<Transcript>,
}

impl Gateway {
    pub fn new(provider: Box<dyn CompletionProvider>) -> Self {
        Self::with_limits(provider, 1, Duration::ZERO)
    }

    pub fn with_limits(provider: Box<dyn CompletionProvider>, max_in_flight: usize, min_interval: Duration) -> Self {
        Self {
            provider: Arc::from(provider),
            limiter: Arc::new(Limiter {
                max_in_flight: max_in_flight.max(1),
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                min_interval,
                last_start: Mutex::new(None),
            }),
            transcript: None,
        }
    }

    /// Same provider and limits, different transcript.
    pub fn fork(&self, transcript: Option<Transcript>) -> Gateway {
        Gateway {
            provider: Arc::clone(&self.provider),
            limiter: Arc::clone(&self.limiter),
            transcript,
        }
    }

    pub fn with_transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn log_event(&self, event: &TranscriptEvent) -> Result<(), GatewayError> {
        if let Some(t) = &self.transcript {
            t.record(event)?;
        }
        Ok(())
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        if request.prompt_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(request.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be non-negative",
                request.temperature
            )));
        }
        self.limiter.acquire();
        let result = self.provider.complete(request);
        self.limiter.release();
        let (response, error, attempt_count) = match &result {
            Ok(r) => (Some(r.text.clone()), None, r.attempt_count),
            Err(e) => (None, Some(e.to_string()), 0),
        };
        self.log_event(&TranscriptEvent::Completion {
            tag: request.request_tag.clone(),
            provider_id: self.provider.provider_id().to_string(),
            prompt: request.prompt_text.clone(),
            response,
            error,
            attempt_count,
        })?;
        result
    }
}

/// Scripted entries that replay a transcript's completions verbatim, matched
/// on the exact original tag.
pub fn script_from_transcript(text: &str) -> Result<Vec<ScriptEntry>, GatewayError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let event: TranscriptEvent = serde_json::from_str(line)
            .map_err(|e| GatewayError::Config(format!("transcript line {}: {e}", n + 1)))?;
        if let TranscriptEvent::Completion {
            tag,
            response: Some(response),
            ..
        } = event
        {
            out.push(ScriptEntry {
                tag_pattern: format!("^{}$", regex::escape(&tag)),
                response_text: response,
            });
        }
    }
    Ok(out)
}
