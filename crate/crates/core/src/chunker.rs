//! Recursive character splitting with overlap.
//!
//! The body is first cut into fragments that tile it exactly: a span longer
//! than `max_chars` is split after each occurrence of the first separator it
//! contains, and oversized pieces recurse into the next separator. The empty
//! separator splits into single characters. Fragments are then merged
//! greedily into chunks of at most `max_chars`; each new chunk re-opens with
//! the trailing fragments of the previous one, up to `overlap_chars`.
//!
//! All offsets are in Unicode scalar values, not bytes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusMode, License, SourceDocument};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("max_chars must be positive")]
    ZeroMax,
    #[error("overlap_chars ({overlap}) must be smaller than max_chars ({max})")]
    OverlapTooLarge { overlap: usize, max: usize },
    #[error("the last separator must be the empty string")]
    MissingCharFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingPolicy {
    pub max_chars: usize,
    pub overlap_chars: usize,
    pub separators: Vec<String>,
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        Self {
            max_chars: 1000,
            overlap_chars: 100,
            separators: ["\n\n", "\n", " ", ""].map(String::from).to_vec(),
        }
    }
}

impl ChunkingPolicy {
    pub fn new(
        max_chars: usize,
        overlap_chars: usize,
        separators: Vec<String>,
    ) -> Result<Self, PolicyError> {
        let policy = Self {
            max_chars,
            overlap_chars,
            separators,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_chars == 0 {
            return Err(PolicyError::ZeroMax);
        }
        if self.overlap_chars >= self.max_chars {
            return Err(PolicyError::OverlapTooLarge {
                overlap: self.overlap_chars,
                max: self.max_chars,
            });
        }
        if self.separators.last().map(String::as_str) != Some("") {
            return Err(PolicyError::MissingCharFallback);
        }
        Ok(())
    }
}

/// Half-open character interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub span: Span,
    pub text: String,
    pub title: String,
    pub uri: String,
    pub license: License,
    pub mode: CorpusMode,
}

/// Splits `doc.body` into overlapping chunks ordered by start offset.
///
/// # Panics
/// If `policy` violates its invariants; call [`ChunkingPolicy::validate`]
/// first when the policy comes from user input.
pub fn split_document(doc: &SourceDocument, policy: &ChunkingPolicy) -> Vec<Chunk> {
    policy.validate().expect("invalid chunking policy");
    let chars: Vec<char> = doc.body.chars().collect();
    split_spans(&chars, policy)
        .into_iter()
        .enumerate()
        .map(|(i, span)| Chunk {
            chunk_id: format!("{}#{i}", doc.doc_id),
            doc_id: doc.doc_id.clone(),
            span,
            text: chars[span.start..span.end].iter().collect(),
            title: doc.title.clone(),
            uri: doc.uri.clone(),
            license: doc.license,
            mode: doc.mode,
        })
        .collect()
}

/// Span-only form of [`split_document`].
pub fn split_spans(chars: &[char], policy: &ChunkingPolicy) -> Vec<Span> {
    if chars.is_empty() {
        return Vec::new();
    }
    let separators: Vec<Vec<char>> = policy
        .separators
        .iter()
        .map(|s| s.chars().collect())
        .collect();
    let mut fragments = Vec::new();
    fragment(chars, 0, chars.len(), 0, &separators, policy.max_chars, &mut fragments);
    merge(&fragments, policy)
}

fn fragment(
    chars: &[char],
    start: usize,
    end: usize,
    level: usize,
    separators: &[Vec<char>],
    max: usize,
    out: &mut Vec<Span>,
) {
    if end - start <= max {
        out.push(Span { start, end });
        return;
    }
    for (lvl, sep) in separators.iter().enumerate().skip(level) {
        if sep.is_empty() {
            out.extend((start..end).map(|i| Span { start: i, end: i + 1 }));
            return;
        }
        let cuts = cut_points(chars, start, end, sep);
        if cuts.is_empty() {
            continue;
        }
        let mut piece_start = start;
        for cut in cuts.into_iter().chain(std::iter::once(end)) {
            if cut > piece_start {
                fragment(chars, piece_start, cut, lvl + 1, separators, max, out);
            }
            piece_start = cut;
        }
        return;
    }
    // Only reachable with a policy lacking the empty separator.
    out.extend((start..end).map(|i| Span { start: i, end: i + 1 }));
}

/// Offsets just past each non-overlapping occurrence of `sep` in `[start, end)`.
fn cut_points(chars: &[char], start: usize, end: usize, sep: &[char]) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut i = start;
    while i + sep.len() <= end {
        if chars[i..i + sep.len()] == *sep {
            i += sep.len();
            if i < end {
                cuts.push(i);
            }
        } else {
            i += 1;
        }
    }
    cuts
}

fn merge(fragments: &[Span], policy: &ChunkingPolicy) -> Vec<Span> {
    let mut chunks = Vec::new();
    let mut current: VecDeque<Span> = VecDeque::new();
    let mut current_len = 0usize;
    for &frag in fragments {
        let len = frag.len();
        if current_len + len > policy.max_chars && !current.is_empty() {
            chunks.push(Span {
                start: current.front().expect("non-empty").start,
                end: current.back().expect("non-empty").end,
            });
            while current_len > 0
                && (current_len > policy.overlap_chars || current_len + len > policy.max_chars)
            {
                let dropped = current.pop_front().expect("non-empty");
                current_len -= dropped.len();
            }
        }
        current.push_back(frag);
        current_len += len;
    }
    if let (Some(first), Some(last)) = (current.front(), current.back()) {
        chunks.push(Span {
            start: first.start,
            end: last.end,
        });
    }
    chunks
}
