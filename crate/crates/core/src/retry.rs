//! HTTP plumbing shared by the embeddings and chat-completion clients:
//! JSON POST with bounded exponential backoff, and a redacting secret type.

use std::fmt;
use std::time::Duration;

use serde::Serialize;

/// API key wrapper; never printed by `Debug`/`Display`.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

impl fmt::Display for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("***")
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpFailure {
    /// Transport error or timeout on the last attempt.
    Connectivity(String),
    /// HTTP 429 on the last attempt.
    RateLimited,
    /// Non-retriable status, or a 5xx on the last attempt.
    Status { status: u16, body: String },
}

impl HttpFailure {
    pub fn is_retriable(&self) -> bool {
        match self {
            HttpFailure::Connectivity(_) | HttpFailure::RateLimited => true,
            HttpFailure::Status { status, .. } => *status >= 500,
        }
    }
}

impl fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HttpFailure::Connectivity(m) => write!(f, "connectivity: {m}"),
            HttpFailure::RateLimited => f.write_str("rate limited"),
            HttpFailure::Status { status, body } => write!(f, "HTTP {status}: {body}"),
        }
    }
}

/// POSTs `body` as JSON and returns the response text of the first 2xx.
/// Transport errors, 429 and 5xx are retried `policy.max_retries` times.
pub async fn post_json_with_retry<T: Serialize + ?Sized>(
    client: &reqwest::Client,
    url: &str,
    api_key: &Secret,
    body: &T,
    policy: &RetryPolicy,
) -> Result<String, HttpFailure> {
    let mut attempt = 0u32;
    loop {
        let mut request = client.post(url).json(body);
        if !api_key.is_empty() {
            request = request.bearer_auth(api_key.expose());
        }
        let failure = match request.send().await {
            Ok(resp) => {
                let status = resp.status();
                let text = resp.text().await;
                match text {
                    Ok(text) if status.is_success() => return Ok(text),
                    Ok(_) if status.as_u16() == 429 => HttpFailure::RateLimited,
                    Ok(text) => HttpFailure::Status {
                        status: status.as_u16(),
                        body: truncate(&text, 512),
                    },
                    Err(e) => HttpFailure::Connectivity(e.to_string()),
                }
            }
            Err(e) => HttpFailure::Connectivity(e.to_string()),
        };
        if !failure.is_retriable() || attempt >= policy.max_retries {
            return Err(failure);
        }
        let delay = policy.delay(attempt);
        tracing::warn!(%url, attempt, ?delay, error = %failure, "retrying request");
        tokio::time::sleep(delay).await;
        attempt += 1;
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
