//! Inference backends.
//!
//! [`LocalServerBackend`] speaks the `POST /api/generate` / `GET /api/tags`
//! protocol of common local model runners (non-streaming). There is no
//! client for hosted APIs. [`ScriptedBackend`] returns canned completions
//! for offline tests and demos.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use url::Url;

use crate::corpus::Example;
use crate::egress::{join, EgressError, LocalHttp};

pub const DEFAULT_BASE_URL: &str = "http://localhost:11434";
pub const DEFAULT_MODEL: &str = "llama3:8b-instruct-q4_0";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("inference server unreachable at {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("inference server at {url} timed out after {secs} s")]
    Timeout { url: String, secs: u64 },
    #[error("inference server at {url} returned HTTP {status}: {body}")]
    Status {
        url: String,
        status: u16,
        body: String,
    },
    #[error("inference server at {url} sent a response without {field:?}")]
    MissingField { url: String, field: &'static str },
    #[error(transparent)]
    Egress(#[from] EgressError),
}

impl BackendError {
    /// The server could not be reached at all (as opposed to answering badly).
    pub fn is_unavailable(&self) -> bool {
        matches!(
            self,
            BackendError::Unreachable { .. } | BackendError::Timeout { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_name: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub seed: Option<i64>,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum Health {
    Healthy,
    Unhealthy(String),
}

impl Health {
    pub fn is_healthy(&self) -> bool {
        matches!(self, Health::Healthy)
    }
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    fn backend_id(&self) -> String;

    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError>;

    async fn health(&self) -> Health;
}

#[derive(Serialize)]
struct WireOptions {
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    num_predict: u32,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    system: &'a str,
    prompt: &'a str,
    stream: bool,
    options: WireOptions,
}

#[derive(Deserialize)]
struct WireResponse {
    response: Option<String>,
}

#[derive(Deserialize)]
struct WireTags {
    #[serde(default)]
    models: Vec<WireModel>,
}

#[derive(Deserialize)]
struct WireModel {
    name: String,
}

fn with_tag(name: &str) -> String {
    if name.contains(':') {
        name.to_string()
    } else {
        format!("{name}:latest")
    }
}

/// Client for a local inference server.
#[derive(Debug, Clone)]
pub struct LocalServerBackend {
    base_url: Url,
    model_name: String,
    http: LocalHttp,
    timeout: Duration,
    permits: Arc<Semaphore>,
}

impl LocalServerBackend {
    /// `http` must permit `base_url`. At most `max_in_flight` requests are
    /// sent concurrently.
    pub fn new(base_url: Url, model_name: impl Into<String>, http: LocalHttp) -> Self {
        Self {
            base_url,
            model_name: model_name.into(),
            http,
            timeout: DEFAULT_TIMEOUT,
            permits: Arc::new(Semaphore::new(1)),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.permits = Arc::new(Semaphore::new(n.max(1)));
        self
    }

    pub fn base_url(&self) -> &Url {
        &self.base_url
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    async fn post_once(&self, url: &Url, body: &WireRequest<'_>) -> Result<String, BackendError> {
        let resp = self
            .http
            .post_json(url, body, self.timeout)?
            .send()
            .await
            .map_err(|e| self.transport_error(url, e))?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| self.transport_error(url, e))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                url: url.to_string(),
                status: status.as_u16(),
                body: String::from_utf8_lossy(&bytes).chars().take(500).collect(),
            });
        }
        let parsed: WireResponse =
            serde_json::from_slice(&bytes).map_err(|_| BackendError::MissingField {
                url: url.to_string(),
                field: "response",
            })?;
        parsed.response.ok_or_else(|| BackendError::MissingField {
            url: url.to_string(),
            field: "response",
        })
    }

    fn transport_error(&self, url: &Url, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout {
                url: url.to_string(),
                secs: self.timeout.as_secs(),
            }
        } else {
            let message = if e.is_connect() {
                "connection refused".to_string()
            } else {
                e.to_string()
            };
            BackendError::Unreachable {
                url: self.base_url.to_string(),
                message,
            }
        }
    }
}

#[async_trait]
impl LlmBackend for LocalServerBackend {
    fn backend_id(&self) -> String {
        format!("local-server:{}@{}", self.model_name, self.base_url)
    }

    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore open");
        let url = join(&self.base_url, "api/generate");
        let body = WireRequest {
            model: &request.model_name,
            system: &request.system_text,
            prompt: &request.user_text,
            stream: false,
            options: WireOptions {
                temperature: request.temperature,
                seed: request.seed,
                num_predict: request.max_tokens,
            },
        };
        let started = Instant::now();
        let text = match self.post_once(&url, &body).await {
            Err(BackendError::Timeout { .. }) => {
                tracing::warn!(%url, "generate timed out, retrying once");
                self.post_once(&url, &body).await?
            }
            other => other?,
        };
        Ok(GenerationResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: self.backend_id(),
        })
    }

    async fn health(&self) -> Health {
        let url = join(&self.base_url, "api/tags");
        let req = match self.http.get(&url, Duration::from_secs(10)) {
            Ok(r) => r,
            Err(e) => return Health::Unhealthy(e.to_string()),
        };
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_connect() => {
                return Health::Unhealthy(format!("connection refused at {}", self.base_url))
            }
            Err(e) => return Health::Unhealthy(format!("{} unreachable: {e}", self.base_url)),
        };
        if !resp.status().is_success() {
            return Health::Unhealthy(format!("{url} returned HTTP {}", resp.status().as_u16()));
        }
        let tags: WireTags = match resp.json().await {
            Ok(t) => t,
            Err(e) => return Health::Unhealthy(format!("{url} returned an unusable body: {e}")),
        };
        let want = with_tag(&self.model_name);
        if tags.models.iter().any(|m| with_tag(&m.name) == want) {
            Health::Healthy
        } else {
            Health::Unhealthy(format!(
                "model {:?} is not available on the server at {}",
                self.model_name, self.base_url
            ))
        }
    }
}

/// A canned response chosen when every substring matches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substrings that must all occur in the user text.
    #[serde(default)]
    pub contains: Vec<String>,
    /// Substrings that must all occur in the system text.
    #[serde(default)]
    pub system_contains: Vec<String>,
    pub response: String,
}

impl ScriptRule {
    pub fn new(contains: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            contains: vec![contains.into()],
            system_contains: Vec::new(),
            response: response.into(),
        }
    }

    fn matches(&self, req: &GenerationRequest) -> bool {
        self.contains
            .iter()
            .all(|s| req.user_text.contains(s.as_str()))
            && self
                .system_contains
                .iter()
                .all(|s| req.system_text.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default_response: String,
}

/// Marker present in the classifier's system text of the shipped templates.
pub const CLASSIFIER_MARKER: &str = "You are a classifier";

/// Deterministic test double: the first rule that matches wins.
#[derive(Default)]
pub struct ScriptedBackend {
    script: Script,
    calls: AtomicUsize,
    log: Mutex<Vec<GenerationRequest>>,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("rules", &self.script.rules.len())
            .field("calls", &self.calls())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, default_response: impl Into<String>) -> Self {
        Self::from_script(Script {
            rules,
            default_response: default_response.into(),
        })
    }

    pub fn from_script(script: Script) -> Self {
        Self {
            script,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Answers every example exactly: its class to the classifier prompt and
    /// its command to the generator prompt. Matching keys on the rendered
    /// `Instruct:` section of the shipped templates.
    pub fn ground_truth<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut rules = Vec::new();
        for ex in examples {
            let anchor = instruct_anchor(&ex.input_text);
            rules.push(ScriptRule {
                contains: vec![anchor.clone()],
                system_contains: vec![CLASSIFIER_MARKER.to_string()],
                response: ex.class_label.clone(),
            });
            rules.push(ScriptRule {
                contains: vec![anchor],
                system_contains: Vec::new(),
                response: ex.command.clone(),
            });
        }
        Self::new(rules, "")
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("request log").clone()
    }

    pub fn respond(&self, request: &GenerationRequest) -> &str {
        self.script
            .rules
            .iter()
            .find(|r| r.matches(request))
            .map(|r| r.response.as_str())
            .unwrap_or(&self.script.default_response)
    }
}

/// The `Instruct:` section as rendered by the shipped templates.
pub fn instruct_anchor(instruction: &str) -> String {
    format!("Instruct:\n{}\n", instruction.trim())
}

#[async_trait]
impl LlmBackend for ScriptedBackend {
    fn backend_id(&self) -> String {
        "scripted".to_string()
    }

    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("request log").push(request.clone());
        Ok(GenerationResponse {
            text: self.respond(request).to_string(),
            latency_ms: 0,
            backend_id: self.backend_id(),
        })
    }

    async fn health(&self) -> Health {
        Health::Healthy
    }
}

#[async_trait]
impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        (**self).generate(request).await
    }

    async fn health(&self) -> Health {
        (**self).health().await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> GenerationRequest {
        GenerationRequest {
            model_name: "m".into(),
            system_text: "sys".into(),
            user_text: user.into(),
            temperature: 0.0,
            seed: Some(1),
            max_tokens: 256,
        }
    }

    #[tokio::test]
    async fn scripted_first_match_wins() {
        let b = ScriptedBackend::new(
            vec![
                ScriptRule::new("give me the list", "Answer:\nlist"),
                ScriptRule::new("give me", "other"),
            ],
            "fallback",
        );
        let r = b
            .generate(&req("Could you please give me the list of active users"))
            .await
            .unwrap();
        assert_eq!(r.text, "Answer:\nlist");
        let r = b.generate(&req("nothing relevant")).await.unwrap();
        assert_eq!(r.text, "fallback");
        assert_eq!(b.calls(), 2);
        assert!(b.health().await.is_healthy());
    }

    #[test]
    fn system_matchers() {
        let rule = ScriptRule {
            contains: vec!["x".into()],
            system_contains: vec!["classifier".into()],
            response: "r".into(),
        };
        let mut r = req("x");
        assert!(!rule.matches(&r));
        r.system_text = "You are a classifier".into();
        assert!(rule.matches(&r));
    }

    #[test]
    fn tag_normalization() {
        assert_eq!(with_tag("llama3"), "llama3:latest");
        assert_eq!(with_tag("llama3:8b"), "llama3:8b");
    }

    #[test]
    fn wire_request_fields() {
        let body = WireRequest {
            model: "m",
            system: "s",
            prompt: "p",
            stream: false,
            options: WireOptions {
                temperature: 0.0,
                seed: None,
                num_predict: 256,
            },
        };
        let v = serde_json::to_value(&body).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "m", "system": "s", "prompt": "p", "stream": false,
                "options": {"temperature": 0.0, "num_predict": 256}
            })
        );
    }
}
