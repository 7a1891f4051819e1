//! Chat-completion wire protocol (OpenAI-compatible message array).

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retry::{post_json_with_retry, HttpFailure, RetryPolicy, Secret};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("completion endpoint unreachable: {0}")]
    Connectivity(String),
    #[error("completion endpoint rate limited the request")]
    RateLimited,
    #[error("completion endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("completion protocol error: {0}")]
    Protocol(String),
}

impl CompletionError {
    pub fn is_retriable(&self) -> bool {
        match self {
            CompletionError::Connectivity(_) | CompletionError::RateLimited => true,
            CompletionError::Status { status, .. } => *status >= 500,
            CompletionError::Protocol(_) => false,
        }
    }
}

impl From<HttpFailure> for CompletionError {
    fn from(f: HttpFailure) -> Self {
        match f {
            HttpFailure::Connectivity(m) => CompletionError::Connectivity(m),
            HttpFailure::RateLimited => CompletionError::RateLimited,
            HttpFailure::Status { status, body } => CompletionError::Status { status, body },
        }
    }
}

#[async_trait]
pub trait ChatCompleter: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, CompletionError>;
}

#[derive(Debug, Clone)]
pub struct CompletionConfig {
    /// Full URL, e.g. `https://api.openai.com/v1/chat/completions`.
    pub endpoint: String,
    pub api_key: Secret,
    pub max_retries: u32,
    pub timeout: Duration,
    pub retry_base_delay: Duration,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key: Secret::default(),
            max_retries: 2,
            timeout: Duration::from_secs(120),
            retry_base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone)]
pub struct OpenAiChatClient {
    client: reqwest::Client,
    config: CompletionConfig,
}

impl OpenAiChatClient {
    pub fn new(config: CompletionConfig) -> Result<Self, CompletionError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| CompletionError::Connectivity(e.to_string()))?;
        Ok(Self { client, config })
    }
}

#[async_trait]
impl ChatCompleter for OpenAiChatClient {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, CompletionError> {
        let policy = RetryPolicy {
            max_retries: self.config.max_retries,
            base_delay: self.config.retry_base_delay,
            ..RetryPolicy::default()
        };
        tracing::debug!(endpoint = %self.config.endpoint, model = %request.model, messages = request.messages.len(), "chat completion");
        let body = post_json_with_retry(
            &self.client,
            &self.config.endpoint,
            &self.config.api_key,
            request,
            &policy,
        )
        .await?;
        parse_completion(&body)
    }
}

fn parse_completion(body: &str) -> Result<Completion, CompletionError> {
    let response: CompletionResponse = serde_json::from_str(body)
        .map_err(|e| CompletionError::Protocol(format!("bad response body: {e}")))?;
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| CompletionError::Protocol("no choices in response".into()))?;
    let text = choice
        .message
        .content
        .filter(|t| !t.is_empty())
        .ok_or_else(|| CompletionError::Protocol("empty completion".into()))?;
    Ok(Completion {
        text,
        usage: response.usage,
    })
}

/// Offline completer for demos: answers with the first retrieved source
/// line of the system prompt, or with the refusal sentence found in the
/// system prompt when no context was retrieved.
#[derive(Debug, Clone)]
pub struct EchoCompleter {
    refusals: Vec<String>,
}

impl EchoCompleter {
    pub fn new(refusals: Vec<String>) -> Self {
        Self { refusals }
    }
}

#[async_trait]
impl ChatCompleter for EchoCompleter {
    async fn complete(&self, request: &CompletionRequest) -> Result<Completion, CompletionError> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let source_line = system
            .find("[source: ")
            .and_then(|start| system[start..].lines().next());
        let text = match source_line {
            Some(line) => format!("The closest grounding material is {line}."),
            None => self
                .refusals
                .iter()
                .find(|r| system.contains(r.as_str()))
                .cloned()
                .unwrap_or_else(|| "I do not know.".to_string()),
        };
        Ok(Completion { text, usage: None })
    }
}
