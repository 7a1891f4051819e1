//! Text embeddings: the remote embeddings wire protocol, a deterministic
//! offline embedder, and the words-based token estimate used for costing.

use std::time::Duration;

use async_trait::async_trait;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retry::{post_json_with_retry, HttpFailure, RetryPolicy, Secret};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embeddings endpoint unreachable: {0}")]
    Connectivity(String),
    #[error("embeddings endpoint rate limited the request")]
    RateLimited,
    #[error("embeddings endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("embeddings protocol error: {0}")]
    Protocol(String),
    #[error("invalid embedding input: {0}")]
    InvalidInput(String),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        match self {
            EmbedError::Connectivity(_) | EmbedError::RateLimited => true,
            EmbedError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

impl From<HttpFailure> for EmbedError {
    fn from(f: HttpFailure) -> Self {
        match f {
            HttpFailure::Connectivity(m) => EmbedError::Connectivity(m),
            HttpFailure::RateLimited => EmbedError::RateLimited,
            HttpFailure::Status { status, body } => EmbedError::Status { status, body },
        }
    }
}

/// Fixed-dimension real vector. Always non-empty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::InvalidInput("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidInput(format!(
                "non-finite component at {i}"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, EmbedError> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
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
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbedError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// Token estimate from the "1,000 tokens are about 750 words" rule:
/// `ceil(words / 0.75)` over whitespace-delimited words.
pub fn estimate_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as u64;
    (words * 4).div_ceil(3)
}

/// Deterministic unit-norm pseudo-random vector seeded by SHA-256 of `text`.
///
/// # Panics
/// If `dim` is zero.
pub fn mock_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim >= 1, "dim must be positive");
    let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut values: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    } else {
        values[0] = 1.0;
    }
    EmbeddingVector { values }
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    /// One vector per input text, in input order.
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

/// Offline embedder backed by [`mock_embed`].
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    model_id: String,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "dim must be positive");
        Self {
            dim,
            model_id: format!("mock-{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[async_trait]
impl Embedder for MockEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| mock_embed(t, self.dim)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct EmbedConfig {
    /// Full URL of the embeddings endpoint, e.g. `https://api.openai.com/v1/embeddings`.
    pub endpoint: String,
    pub model_id: String,
    pub api_key: Secret,
    pub batch_size: usize,
    pub max_retries: u32,
    pub timeout: Duration,
    pub retry_base_delay: Duration,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model_id: "text-embedding-3-large".into(),
            api_key: Secret::default(),
            batch_size: 64,
            max_retries: 3,
            timeout: Duration::from_secs(60),
            retry_base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// Client for the OpenAI-compatible `POST /embeddings` shape.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: reqwest::Client,
    config: EmbedConfig,
}

impl RemoteEmbedder {
    pub fn new(config: EmbedConfig) -> Result<Self, EmbedError> {
        if config.batch_size == 0 {
            return Err(EmbedError::InvalidInput("batch_size must be >= 1".into()));
        }
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| EmbedError::Connectivity(e.to_string()))?;
        Ok(Self { client, config })
    }

    async fn embed_one_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let policy = RetryPolicy {
            max_retries: self.config.max_retries,
            base_delay: self.config.retry_base_delay,
            ..RetryPolicy::default()
        };
        let request = EmbeddingRequest {
            model: &self.config.model_id,
            input: texts,
        };
        tracing::debug!(endpoint = %self.config.endpoint, n = texts.len(), "embedding batch");
        let body = post_json_with_retry(
            &self.client,
            &self.config.endpoint,
            &self.config.api_key,
            &request,
            &policy,
        )
        .await?;
        let response: EmbeddingResponse = serde_json::from_str(&body)
            .map_err(|e| EmbedError::Protocol(format!("bad response body: {e}")))?;
        order_by_index(response.data, texts.len())
    }
}

fn order_by_index(
    data: Vec<EmbeddingDatum>,
    expected: usize,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if data.len() != expected {
        return Err(EmbedError::Protocol(format!(
            "expected {expected} vectors, got {}",
            data.len()
        )));
    }
    let mut slots: Vec<Option<EmbeddingVector>> = vec![None; expected];
    for datum in data {
        let slot = slots.get_mut(datum.index).ok_or_else(|| {
            EmbedError::Protocol(format!("index {} out of range", datum.index))
        })?;
        if slot.is_some() {
            return Err(EmbedError::Protocol(format!(
                "duplicate index {}",
                datum.index
            )));
        }
        let vector = EmbeddingVector::new(datum.embedding)
            .map_err(|e| EmbedError::Protocol(e.to_string()))?;
        *slot = Some(vector);
    }
    Ok(slots.into_iter().map(|v| v.expect("all slots filled")).collect())
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        embed_batch_with(self, texts).await
    }
}

async fn embed_batch_with(
    embedder: &RemoteEmbedder,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(EmbedError::InvalidInput(format!("text {i} is empty")));
    }
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(embedder.config.batch_size) {
        let vectors = embedder.embed_one_batch(batch).await?;
        let dim = out.first().or(vectors.first()).map(EmbeddingVector::dim);
        if let (Some(dim), Some(bad)) = (dim, vectors.iter().find(|v| Some(v.dim()) != dim)) {
            return Err(EmbedError::Protocol(format!(
                "inconsistent dimensions {dim} and {}",
                bad.dim()
            )));
        }
        out.extend(vectors);
    }
    Ok(out)
}

/// Embeds `texts` against the configured endpoint in batches of
/// `config.batch_size`.
pub async fn embed_batch(
    texts: &[String],
    config: &EmbedConfig,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    RemoteEmbedder::new(config.clone())?.embed(texts).await
}
