//! Grounded retrieval-augmented chat.
//!
//! The crate covers the whole offline and online path: corpus ingestion
//! (handbook sitemap + HTML pages, research texts + citation CSV), chunking,
//! embeddings, an exact flat L2 vector index with a binary on-disk format,
//! the conversation chain that assembles grounded prompts, token cost
//! accounting, an HTTP JSON service and an evaluation harness.

pub mod chunker;
pub mod corpus;
pub mod costing;
pub mod embed;
pub mod eval;
pub mod index;
pub mod llm;
pub mod rag;
pub mod retry;
pub mod service;

pub use chunker::{split_document, Chunk, ChunkingPolicy};
pub use corpus::{CorpusMode, License, SourceDocument};
pub use costing::{CostEstimate, PricingTable};
pub use embed::{estimate_tokens, mock_embed, EmbeddingVector};
pub use index::{l2_distance, RetrievalHit, VectorIndex};
pub use rag::{ChatSession, GenerationPolicy, GroundedAnswer, PromptTemplate};
