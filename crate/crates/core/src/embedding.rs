//! Text embeddings for retrieval.
//!
//! Two modes: a remote endpoint speaking `POST {model, input: [..]}` →
//! `{embeddings: [[..]]}`, or a deterministic hashed bag-of-words fallback
//! that needs no external process.
//!
//! Fallback tokenization lowercases the text and splits on every run of
//! non-alphanumeric characters. Each token is hashed with 64-bit FNV-1a over
//! its UTF-8 bytes; `hash % dim` selects the bucket. Bucket counts are then
//! L2-normalized (empty text yields the zero vector).

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use url::Url;

use crate::egress::{EgressError, LocalHttp};

pub const DEFAULT_FALLBACK_DIM: usize = 256;
pub const MIN_FALLBACK_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("embedding contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("embedding endpoint unreachable at {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("embedding endpoint {url} returned HTTP {status}")]
    Status { url: String, status: u16 },
    #[error("embedding endpoint {url} returned an unusable body: {message}")]
    BadResponse { url: String, message: String },
    #[error("embedding endpoint returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error(transparent)]
    Egress(#[from] EgressError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Cosine similarity in `[-1, 1]`; zero when either vector is all-zero.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Remote,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub mode: EmbedMode,
    /// Full URL of the embedding endpoint (remote mode).
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    /// Vector length. Required in fallback mode; in remote mode, when set,
    /// responses of any other length are rejected.
    pub dim: Option<usize>,
    /// Prepended to query texts (not to corpus texts) before embedding.
    pub query_prefix: String,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            mode: EmbedMode::Fallback,
            endpoint_url: None,
            model_name: None,
            dim: Some(DEFAULT_FALLBACK_DIM),
            query_prefix: String::new(),
            batch_size: 32,
            max_in_flight: 4,
            timeout_secs: 60,
        }
    }
}

impl EmbedderConfig {
    pub fn fallback(dim: usize) -> Self {
        Self {
            dim: Some(dim),
            ..Self::default()
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            mode: EmbedMode::Remote,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            dim: None,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), EmbedError> {
        match self.mode {
            EmbedMode::Fallback => {
                let dim = self.dim.unwrap_or(DEFAULT_FALLBACK_DIM);
                if dim < MIN_FALLBACK_DIM {
                    return Err(EmbedError::Config(format!(
                        "fallback dim must be >= {MIN_FALLBACK_DIM}, got {dim}"
                    )));
                }
            }
            EmbedMode::Remote => {
                if self.endpoint_url.is_none() || self.model_name.is_none() {
                    return Err(EmbedError::Config(
                        "remote mode needs endpoint_url and model_name".into(),
                    ));
                }
            }
        }
        if self.batch_size == 0 || self.max_in_flight == 0 {
            return Err(EmbedError::Config(
                "batch_size and max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parsed endpoint URL in remote mode.
    pub fn endpoint(&self) -> Result<Option<Url>, EmbedError> {
        match (self.mode, &self.endpoint_url) {
            (EmbedMode::Remote, Some(u)) => Ok(Some(crate::egress::parse_url(u)?)),
            _ => Ok(None),
        }
    }

    /// Identity of the vector space: two configs with the same signature
    /// produce interchangeable vectors.
    pub fn signature(&self) -> String {
        match self.mode {
            EmbedMode::Fallback => format!(
                "fallback-fnv1a:{}",
                self.dim.unwrap_or(DEFAULT_FALLBACK_DIM)
            ),
            EmbedMode::Remote => format!(
                "remote:{}:{}",
                self.endpoint_url.as_deref().unwrap_or_default(),
                self.model_name.as_deref().unwrap_or_default()
            ),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

pub fn fallback_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hashed bag-of-words embedding, L2-normalized.
pub fn fallback_embed(text: &str, dim: usize) -> EmbeddingVector {
    let mut counts = vec![0.0f64; dim];
    for tok in fallback_tokens(text) {
        let bucket = (fnv1a64(tok.as_bytes()) % dim as u64) as usize;
        counts[bucket] += 1.0;
    }
    let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut counts {
            *v /= norm;
        }
    }
    EmbeddingVector { values: counts }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Embeds texts according to an [`EmbedderConfig`].
#[derive(Debug, Clone)]
pub struct Embedder {
    config: EmbedderConfig,
    http: Option<LocalHttp>,
    endpoint: Option<Url>,
    permits: Arc<Semaphore>,
}

impl Embedder {
    pub fn fallback(dim: usize) -> Self {
        Self::new(EmbedderConfig::fallback(dim), None).expect("fallback config")
    }

    /// `http` is required in remote mode and must permit the endpoint.
    pub fn new(config: EmbedderConfig, http: Option<LocalHttp>) -> Result<Self, EmbedError> {
        config.check()?;
        let endpoint = config.endpoint()?;
        if endpoint.is_some() && http.is_none() {
            return Err(EmbedError::Config(
                "remote mode needs an http client".into(),
            ));
        }
        let permits = Arc::new(Semaphore::new(config.max_in_flight));
        Ok(Self {
            config,
            http,
            endpoint,
            permits,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn signature(&self) -> String {
        self.config.signature()
    }

    pub async fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.embed_batch(&[text.to_string()]).await?;
        Ok(v.remove(0))
    }

    /// Embeds a retrieval query, applying the configured query prefix.
    pub async fn embed_query(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if self.config.query_prefix.is_empty() {
            self.embed(text).await
        } else {
            self.embed(&format!("{}{text}", self.config.query_prefix))
                .await
        }
    }

    pub async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        match self.config.mode {
            EmbedMode::Fallback => {
                let dim = self.config.dim.unwrap_or(DEFAULT_FALLBACK_DIM);
                Ok(texts.iter().map(|t| fallback_embed(t, dim)).collect())
            }
            EmbedMode::Remote => {
                let chunks = texts.chunks(self.config.batch_size);
                let results =
                    futures::future::try_join_all(chunks.map(|c| self.remote_chunk(c))).await?;
                Ok(results.into_iter().flatten().collect())
            }
        }
    }

    async fn remote_chunk(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let _permit = self.permits.acquire().await.expect("semaphore open");
        let (Some(http), Some(url)) = (&self.http, &self.endpoint) else {
            return Err(EmbedError::Config("remote mode without endpoint".into()));
        };
        let body = EmbedRequest {
            model: self.config.model_name.as_deref().unwrap_or_default(),
            input: texts,
        };
        let req = http.post_json(url, &body, Duration::from_secs(self.config.timeout_secs))?;
        let resp = req.send().await.map_err(|e| EmbedError::Unreachable {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Status {
                url: url.to_string(),
                status: status.as_u16(),
            });
        }
        let bytes = resp.bytes().await.map_err(|e| EmbedError::Unreachable {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        let parsed: EmbedResponse =
            serde_json::from_slice(&bytes).map_err(|e| EmbedError::BadResponse {
                url: url.to_string(),
                message: e.to_string(),
            })?;
        if parsed.embeddings.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: parsed.embeddings.len(),
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        let expected_dim = self
            .config
            .dim
            .or_else(|| parsed.embeddings.first().map(Vec::len));
        for values in parsed.embeddings {
            if let Some(d) = expected_dim {
                if values.len() != d {
                    return Err(EmbedError::DimMismatch {
                        left: d,
                        right: values.len(),
                    });
                }
            }
            if values.is_empty() {
                return Err(EmbedError::BadResponse {
                    url: url.to_string(),
                    message: "empty embedding".into(),
                });
            }
            out.push(EmbeddingVector::new(values)?);
        }
        Ok(out)
    }
}
