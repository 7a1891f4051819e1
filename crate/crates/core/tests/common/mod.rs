#![allow(dead_code)]

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use groundchat::chunker::{split_document, ChunkingPolicy};
use groundchat::corpus::{
    load_handbook_mirror, load_research_corpus, parse_sitemap, CorpusMode, HandbookLayout,
    SourceDocument,
};
use groundchat::embed::mock_embed;
use groundchat::index::{IndexBuilder, VectorIndex};
use groundchat::service::{AppState, CompletionBackend, EmbedBackend, IndexPaths, ServiceConfig};

pub const DIM: usize = 32;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn handbook_docs() -> Vec<SourceDocument> {
    let dir = fixtures().join("handbook");
    let xml = std::fs::read_to_string(dir.join("sitemap.xml")).unwrap();
    let layout = HandbookLayout::default();
    let uris = layout.filter_and_order(&parse_sitemap(&xml).unwrap());
    load_handbook_mirror(&layout, &uris, &dir.join("mirror")).unwrap()
}

pub fn research_docs() -> Vec<SourceDocument> {
    let dir = fixtures().join("research");
    load_research_corpus(&dir.join("texts"), &dir.join("citations.csv")).unwrap()
}

pub fn mock_index(docs: &[SourceDocument], mode: CorpusMode, dim: usize) -> VectorIndex {
    let policy = ChunkingPolicy::default();
    let mut builder = IndexBuilder::new(dim, mode, format!("mock-{dim}"), policy.clone());
    for doc in docs {
        for chunk in split_document(doc, &policy) {
            builder.push(&chunk, &mock_embed(&chunk.text, dim)).unwrap();
        }
    }
    builder.finalize()
}

pub async fn spawn(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router).await.unwrap();
    });
    format!("http://{addr}")
}

/// Chat-completions stub. Keyed on the last user message: scripted replies,
/// scripted failure statuses, `history:` messages answered with every user
/// message of the request joined by `|`; anything else echoes the first
/// `[source: ...]` line of the system prompt.
#[derive(Default)]
pub struct StubLlm {
    pub replies: HashMap<String, String>,
    pub failures: HashMap<String, u16>,
    pub calls: AtomicUsize,
    pub requests: std::sync::Mutex<Vec<Value>>,
}

pub fn first_source_line(system: &str) -> Option<&str> {
    let start = system.find("[source: ")?;
    system[start..].lines().next()
}

async fn complete(State(stub): State<Arc<StubLlm>>, Json(body): Json<Value>) -> Response {
    stub.calls.fetch_add(1, Ordering::SeqCst);
    stub.requests.lock().unwrap().push(body.clone());
    let messages = body["messages"].as_array().cloned().unwrap_or_default();
    let system = messages
        .first()
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string();
    let user = messages
        .last()
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string();
    if let Some(&status) = stub.failures.get(&user) {
        return (StatusCode::from_u16(status).unwrap(), "scripted failure").into_response();
    }
    let text = if user.starts_with("history:") {
        messages
            .iter()
            .filter(|m| m["role"] == "user")
            .filter_map(|m| m["content"].as_str())
            .collect::<Vec<_>>()
            .join("|")
    } else {
        match stub.replies.get(&user) {
            Some(reply) => reply.clone(),
            None => first_source_line(&system).unwrap_or("no context").to_string(),
        }
    };
    Json(json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    }))
    .into_response()
}

pub async fn spawn_stub_llm(stub: StubLlm) -> (String, Arc<StubLlm>) {
    let stub = Arc::new(stub);
    let router = Router::new()
        .route("/v1/chat/completions", post(complete))
        .with_state(stub.clone());
    let base = spawn(router).await;
    (format!("{base}/v1/chat/completions"), stub)
}

pub fn test_config(llm_endpoint: &str) -> ServiceConfig {
    let mut config = ServiceConfig {
        indices: IndexPaths {
            basic: Some("unused-basic.idx".into()),
            research: None,
        },
        api_key_env: "GROUNDCHAT_TEST_KEY_NEVER_SET".into(),
        ..ServiceConfig::default()
    };
    config.embed.backend = EmbedBackend::Mock;
    config.embed.mock_dim = DIM;
    config.completion.backend = CompletionBackend::Remote;
    config.completion.endpoint = llm_endpoint.to_string();
    config
}

pub fn test_state(config: ServiceConfig) -> AppState {
    let backends = config.backends().unwrap();
    AppState::new(config, backends)
}
