//! Conversation chain: retrieve, assemble the grounded prompt, complete.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::corpus::{CorpusMode, License};
use crate::costing::{cost_with_source, CostEstimate, PricingTable, TokenSource};
use crate::embed::{estimate_tokens, EmbedError, Embedder};
use crate::index::{IndexError, RetrievalHit, VectorIndex};
use crate::llm::{ChatCompleter, ChatMessage, CompletionError, CompletionRequest, Role};

pub const CONTEXT_SLOT: &str = "{context}";
pub const MAX_SOURCES: usize = 5;

pub const BASIC_REFUSAL: &str = "As a SQC chatbot grounded only in NIST/SEMATECH's Engineering Statistics Handbook, I do not know the answer to this question as it is not in my referenced/grounding material. I am sorry for not being able to help.";

pub const RESEARCH_REFUSAL: &str = "As a SQC chatbot grounded only in open-access SQC research papers, I do not know the answer to this question as it is not in my referenced/grounding material. I am sorry for not being able to help.";

pub const BASIC_SOURCE_SUFFIX: &str = "(Source: NIST/SEMATECH e-Handbook of Statistical Methods)";

/// The Basic prompt carries a literal backslash-n (not a line break) before
/// the source suffix and before the context.
pub const BASIC_SYSTEM_TEXT: &str = r"You are a Q&A bot, an intelligent system that answers user questions ONLY based on the information provided by the user. When you use the information provided by the user, please include `\n (Source: NIST/SEMATECH e-Handbook of Statistical Methods)' at the end of your response with a line break. If the information cannot be found in the user information, please say, `As a SQC chatbot grounded only in NIST/SEMATECH's Engineering Statistics Handbook, I do not know the answer to this question as it is not in my referenced/grounding material. I am sorry for not being able to help.' No answers should be made based on your in-house knowledge. For example, you may know what a large language model is, but that information does not come from the knowledge base that we provided to you. So defining a large language model based on your knowledge is unacceptable. Obviously, other algorithms, descriptions, and formulas that are not in the knowledge base we provided are also unacceptable. The context is:\n{context}.";

pub const RESEARCH_SYSTEM_TEXT: &str = "You are a Q&A bot, an intelligent system that answers user questions ONLY based on the information provided by the user. If the information cannot be found in the user information, please say 'As a SQC chatbot grounded only in open-access SQC research papers, I do not know the answer to this question as it is not in my referenced/grounding material. I am sorry for not being able to help.' No answers should be made based on your in-house knowledge. For example, you may know what a large language model is, but that information does not come from the knowledge base that we provided to you. So defining a large language model based on your knowledge is unacceptable. Obviously, other algorithms, descriptions, and formulas that are not in the knowledge base we provided are also unacceptable. The context is:\n{context}.";

#[derive(Debug, Error)]
pub enum RagError {
    #[error("prompt template must contain exactly one {CONTEXT_SLOT} slot, found {0}")]
    Template(usize),
    #[error("user message is empty")]
    EmptyMessage,
    #[error("session mode {session} does not match index mode {index}")]
    ModeMismatch { session: CorpusMode, index: CorpusMode },
    #[error("invalid generation policy: {0}")]
    Policy(String),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("completion failed: {0}")]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl RagError {
    /// Failure of an external model endpoint.
    pub fn is_upstream(&self) -> bool {
        matches!(self, RagError::Embed(_) | RagError::Completion(_))
    }

    pub fn is_retriable(&self) -> bool {
        match self {
            RagError::Embed(e) => e.is_retriable(),
            RagError::Completion(e) => e.is_retriable(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub mode: CorpusMode,
    pub system_text: String,
    pub refusal_sentence: String,
    pub source_suffix: Option<String>,
}

impl PromptTemplate {
    pub fn basic() -> Self {
        Self {
            mode: CorpusMode::Basic,
            system_text: BASIC_SYSTEM_TEXT.into(),
            refusal_sentence: BASIC_REFUSAL.into(),
            source_suffix: Some(BASIC_SOURCE_SUFFIX.into()),
        }
    }

    pub fn research() -> Self {
        Self {
            mode: CorpusMode::Research,
            system_text: RESEARCH_SYSTEM_TEXT.into(),
            refusal_sentence: RESEARCH_REFUSAL.into(),
            source_suffix: None,
        }
    }

    pub fn for_mode(mode: CorpusMode) -> Self {
        match mode {
            CorpusMode::Basic => Self::basic(),
            CorpusMode::Research => Self::research(),
        }
    }

    pub fn validate(&self) -> Result<(), RagError> {
        let slots = self.system_text.matches(CONTEXT_SLOT).count();
        if slots != 1 {
            return Err(RagError::Template(slots));
        }
        Ok(())
    }

    pub fn render_system(&self, context: &str) -> Result<String, RagError> {
        self.validate()?;
        Ok(self.system_text.replacen(CONTEXT_SLOT, context, 1))
    }
}

/// True iff `answer_text` contains the template's refusal sentence verbatim.
pub fn is_refusal(answer_text: &str, template: &PromptTemplate) -> bool {
    answer_text.contains(&template.refusal_sentence)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
    pub at: DateTime<Utc>,
}

/// Append-only memory buffer of one conversation.
#[derive(Debug, Clone, Serialize)]
pub struct ChatSession {
    pub session_id: Uuid,
    pub mode: CorpusMode,
    pub created_at: DateTime<Utc>,
    turns: Vec<ChatTurn>,
}

impl ChatSession {
    pub fn new(mode: CorpusMode) -> Self {
        Self {
            session_id: Uuid::new_v4(),
            mode,
            created_at: Utc::now(),
            turns: Vec::new(),
        }
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    fn push_exchange(&mut self, user: &str, assistant: &str, at: DateTime<Utc>) {
        self.turns.push(ChatTurn {
            role: Role::User,
            text: user.to_string(),
            at,
        });
        self.turns.push(ChatTurn {
            role: Role::Assistant,
            text: assistant.to_string(),
            at,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPolicy {
    pub model_id: String,
    pub temperature: f64,
    pub max_context_hits: usize,
}

impl Default for GenerationPolicy {
    fn default() -> Self {
        Self {
            model_id: "gpt-4-turbo-preview".into(),
            temperature: 0.25,
            max_context_hits: MAX_SOURCES,
        }
    }
}

impl GenerationPolicy {
    pub fn validate(&self) -> Result<(), RagError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(RagError::Policy(format!(
                "temperature must be in [0, 2], got {}",
                self.temperature
            )));
        }
        if self.max_context_hits == 0 || self.max_context_hits > MAX_SOURCES {
            return Err(RagError::Policy(format!(
                "max_context_hits must be in 1..={MAX_SOURCES}, got {}",
                self.max_context_hits
            )));
        }
        if self.model_id.trim().is_empty() {
            return Err(RagError::Policy("model_id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceHit {
    pub chunk_id: String,
    pub title: String,
    pub uri: String,
    pub license: License,
    pub text: String,
    pub distance: f64,
}

impl From<&RetrievalHit<'_>> for SourceHit {
    fn from(hit: &RetrievalHit<'_>) -> Self {
        Self {
            chunk_id: hit.entry.chunk_id.clone(),
            title: hit.entry.title.clone(),
            uri: hit.entry.uri.clone(),
            license: hit.entry.license,
            text: hit.entry.text.clone(),
            distance: hit.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub text: String,
    pub hits: Vec<SourceHit>,
    pub generated_at: DateTime<Utc>,
    pub cost: CostEstimate,
    pub refused: bool,
}

/// Hits in the given (ascending-distance) order, each as a
/// `[source: <title> | <uri>]` line followed by its text, separated by
/// blank lines.
pub fn build_context(hits: &[RetrievalHit<'_>]) -> String {
    hits.iter()
        .map(|h| format!("[source: {} | {}]\n{}", h.entry.title, h.entry.uri, h.entry.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn compose_messages(
    session: &ChatSession,
    user_msg: &str,
    context: &str,
    template: &PromptTemplate,
) -> Result<Vec<ChatMessage>, RagError> {
    if user_msg.trim().is_empty() {
        return Err(RagError::EmptyMessage);
    }
    let mut messages = Vec::with_capacity(session.turns.len() + 2);
    messages.push(ChatMessage::new(Role::System, template.render_system(context)?));
    messages.extend(
        session
            .turns
            .iter()
            .map(|t| ChatMessage::new(t.role, t.text.clone())),
    );
    messages.push(ChatMessage::new(Role::User, user_msg));
    Ok(messages)
}

/// Model endpoints used by [`generate`].
#[derive(Clone)]
pub struct Backends {
    pub embedder: Arc<dyn Embedder>,
    pub completer: Arc<dyn ChatCompleter>,
}

/// Runs one question through the chain. On any error the session is left
/// untouched.
pub async fn generate(
    session: &mut ChatSession,
    user_msg: &str,
    index: &VectorIndex,
    backends: &Backends,
    template: &PromptTemplate,
    policy: &GenerationPolicy,
    pricing: &PricingTable,
) -> Result<GroundedAnswer, RagError> {
    if user_msg.trim().is_empty() {
        return Err(RagError::EmptyMessage);
    }
    policy.validate()?;
    for mode in [index.mode(), template.mode] {
        if mode != session.mode {
            return Err(RagError::ModeMismatch {
                session: session.mode,
                index: mode,
            });
        }
    }

    let query = backends
        .embedder
        .embed(&[user_msg.to_string()])
        .await?
        .pop()
        .ok_or_else(|| EmbedError::Protocol("no embedding returned".into()))?;
    let retrieved = index.search(&query, policy.max_context_hits.min(MAX_SOURCES))?;
    let context = build_context(&retrieved);
    let messages = compose_messages(session, user_msg, &context, template)?;

    let request = CompletionRequest {
        model: policy.model_id.clone(),
        temperature: policy.temperature,
        messages,
    };
    let completion = backends.completer.complete(&request).await?;

    let cost = match completion.usage {
        Some(u) => cost_with_source(u.prompt_tokens, u.completion_tokens, pricing, TokenSource::Reported),
        None => {
            let prompt_tokens = request
                .messages
                .iter()
                .map(|m| estimate_tokens(&m.content))
                .sum();
            cost_with_source(
                prompt_tokens,
                estimate_tokens(&completion.text),
                pricing,
                TokenSource::Estimated,
            )
        }
    };
    let generated_at = Utc::now();
    session.push_exchange(user_msg, &completion.text, generated_at);
    Ok(GroundedAnswer {
        refused: is_refusal(&completion.text, template),
        hits: retrieved.iter().map(SourceHit::from).collect(),
        text: completion.text,
        generated_at,
        cost,
    })
}
