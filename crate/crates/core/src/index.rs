//! Exact flat L2 index over chunk embeddings.
//!
//! Vectors are stored as `f32`; distances accumulate in `f64`. Queries are
//! rounded to `f32` before scoring so a query equal to a stored embedding
//! scores exactly zero against it.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "GRAGIDX1"
//! version    u32
//! dim        u32
//! count      u64
//! mode       u8       0 = basic, 1 = research
//! model_id   str
//! built_at   i64      unix milliseconds
//! max_chars  u32
//! overlap    u32
//! n_seps     u32, then n_seps x str
//! entries    count x { chunk_id str, doc_id str, title str, uri str,
//!                      license u8, text str, vector dim x f32 }
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::chunker::{Chunk, ChunkingPolicy};
use crate::corpus::{CorpusMode, License};
use crate::embed::EmbeddingVector;

pub const MAGIC: &[u8; 8] = b"GRAGIDX1";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("not an index file: {0}")]
    Format(String),
    #[error("corrupt index file at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error("invalid index: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Euclidean distance, accumulated in `f64` in component order.
pub fn l2_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(sum_sq(a.values().iter().copied().zip(b.values().iter().copied())).sqrt())
}

fn sum_sq(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in pairs {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn l2_f32(a: &[f32], b: &[f32]) -> f64 {
    sum_sq(
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (f64::from(x), f64::from(y))),
    )
    .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub uri: String,
    pub license: License,
    pub text: String,
    vector: Vec<f32>,
}

impl IndexEntry {
    pub fn raw_vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn vector(&self) -> EmbeddingVector {
        EmbeddingVector::from_f32(&self.vector).expect("stored vectors are finite")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildMetadata {
    pub model_id: String,
    pub policy: ChunkingPolicy,
    pub built_at: DateTime<Utc>,
}

/// Header fields as exposed by `dump-index`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexHeader {
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub mode: CorpusMode,
    pub model_id: String,
    pub built_at: DateTime<Utc>,
    pub policy: ChunkingPolicy,
}

/// Finalized, immutable index. Share it behind an `Arc` for concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    mode: CorpusMode,
    metadata: BuildMetadata,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone)]
pub struct RetrievalHit<'a> {
    pub entry: &'a IndexEntry,
    /// Insertion position of the entry.
    pub position: usize,
    pub distance: f64,
}

/// Single-writer build phase of a [`VectorIndex`].
#[derive(Debug)]
pub struct IndexBuilder {
    dim: usize,
    mode: CorpusMode,
    metadata: BuildMetadata,
    entries: Vec<IndexEntry>,
    ids: HashSet<String>,
}

impl IndexBuilder {
    pub fn new(dim: usize, mode: CorpusMode, model_id: impl Into<String>, policy: ChunkingPolicy) -> Self {
        assert!(dim >= 1, "dim must be positive");
        Self {
            dim,
            mode,
            metadata: BuildMetadata {
                model_id: model_id.into(),
                policy,
                built_at: Utc.timestamp_millis_opt(Utc::now().timestamp_millis()).unwrap(),
            },
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn built_at(mut self, at: DateTime<Utc>) -> Self {
        self.metadata.built_at = Utc.timestamp_millis_opt(at.timestamp_millis()).unwrap();
        self
    }

    pub fn push(&mut self, chunk: &Chunk, vector: &EmbeddingVector) -> Result<(), IndexError> {
        if chunk.mode != self.mode {
            return Err(IndexError::Validation(format!(
                "chunk {} is {} mode, index is {}",
                chunk.chunk_id, chunk.mode, self.mode
            )));
        }
        self.push_entry(IndexEntry {
            chunk_id: chunk.chunk_id.clone(),
            doc_id: chunk.doc_id.clone(),
            title: chunk.title.clone(),
            uri: chunk.uri.clone(),
            license: chunk.license,
            text: chunk.text.clone(),
            vector: vector.values().iter().map(|&v| v as f32).collect(),
        })
    }

    fn push_entry(&mut self, entry: IndexEntry) -> Result<(), IndexError> {
        if entry.vector.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: entry.vector.len(),
            });
        }
        if !entry.vector.iter().all(|v| v.is_finite()) {
            return Err(IndexError::Validation(format!(
                "{}: vector not finite in f32",
                entry.chunk_id
            )));
        }
        if !self.ids.insert(entry.chunk_id.clone()) {
            return Err(IndexError::DuplicateChunk(entry.chunk_id));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finalize(self) -> VectorIndex {
        VectorIndex {
            dim: self.dim,
            mode: self.mode,
            metadata: self.metadata,
            entries: self.entries,
        }
    }
}

impl VectorIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CorpusMode {
        self.mode
    }

    pub fn metadata(&self) -> &BuildMetadata {
        &self.metadata
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn header(&self) -> IndexHeader {
        IndexHeader {
            version: FORMAT_VERSION,
            dim: self.dim,
            count: self.entries.len(),
            mode: self.mode,
            model_id: self.metadata.model_id.clone(),
            built_at: self.metadata.built_at,
            policy: self.metadata.policy.clone(),
        }
    }

    /// The query as the index scores it (components rounded to `f32`).
    pub fn quantize(&self, query: &EmbeddingVector) -> Result<EmbeddingVector, IndexError> {
        self.check_dim(query)?;
        let rounded: Vec<f32> = query.values().iter().map(|&v| v as f32).collect();
        EmbeddingVector::from_f32(&rounded)
            .map_err(|_| IndexError::Validation("query overflows f32".into()))
    }

    fn check_dim(&self, query: &EmbeddingVector) -> Result<(), IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        Ok(())
    }

    /// The `min(k, n)` nearest entries, ascending by distance, ties broken
    /// by insertion order.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit<'_>>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        self.check_dim(query)?;
        let q: Vec<f32> = query.values().iter().map(|&v| v as f32).collect();
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (l2_f32(&q, &e.vector), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(distance, position)| RetrievalHit {
                entry: &self.entries[position],
                position,
                distance,
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut file = std::fs::File::create(&tmp)?;
            file.write_all(&bytes)?;
            file.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.entries.len() * (self.dim * 4 + 256));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.push(mode_byte(self.mode));
        put_str(&mut out, &self.metadata.model_id);
        out.extend_from_slice(&self.metadata.built_at.timestamp_millis().to_le_bytes());
        let policy = &self.metadata.policy;
        out.extend_from_slice(&(policy.max_chars as u32).to_le_bytes());
        out.extend_from_slice(&(policy.overlap_chars as u32).to_le_bytes());
        out.extend_from_slice(&(policy.separators.len() as u32).to_le_bytes());
        for sep in &policy.separators {
            put_str(&mut out, sep);
        }
        for e in &self.entries {
            put_str(&mut out, &e.chunk_id);
            put_str(&mut out, &e.doc_id);
            put_str(&mut out, &e.title);
            put_str(&mut out, &e.uri);
            out.push(license_byte(e.license));
            put_str(&mut out, &e.text);
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(IndexError::Format("bad magic bytes".into()));
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(IndexError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(IndexError::Validation("dim is zero".into()));
        }
        let count = r.u64()?;
        let mode_at = r.pos;
        let mode = match r.u8()? {
            0 => CorpusMode::Basic,
            1 => CorpusMode::Research,
            b => return Err(r.corrupt_at(mode_at, format!("unknown mode byte {b}"))),
        };
        let model_id = r.string()?;
        let built_at_ms = r.i64()?;
        let built_at = Utc
            .timestamp_millis_opt(built_at_ms)
            .single()
            .ok_or_else(|| IndexError::Validation(format!("bad timestamp {built_at_ms}")))?;
        let max_chars = r.u32()? as usize;
        let overlap_chars = r.u32()? as usize;
        let n_seps = r.u32()?;
        let mut separators = Vec::new();
        for _ in 0..n_seps {
            separators.push(r.string()?);
        }
        let policy = ChunkingPolicy {
            max_chars,
            overlap_chars,
            separators,
        };
        policy
            .validate()
            .map_err(|e| IndexError::Validation(e.to_string()))?;

        let mut builder = IndexBuilder {
            dim,
            mode,
            metadata: BuildMetadata {
                model_id,
                policy,
                built_at,
            },
            entries: Vec::new(),
            ids: HashSet::new(),
        };
        let per_entry_min = (dim * 4 + 21) as u64;
        if count > (bytes.len() as u64) / per_entry_min + 1 {
            return Err(r.corrupt_at(
                bytes.len(),
                format!("header claims {count} entries, file too short"),
            ));
        }
        for _ in 0..count {
            let chunk_id = r.string()?;
            let doc_id = r.string()?;
            let title = r.string()?;
            let uri = r.string()?;
            let license_at = r.pos;
            let license = match r.u8()? {
                0 => License::PublicDomain,
                1 => License::CcBy,
                2 => License::CcByNc,
                b => return Err(r.corrupt_at(license_at, format!("unknown license byte {b}"))),
            };
            let text = r.string()?;
            let raw = r.take(dim * 4)?;
            let vector: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            builder.push_entry(IndexEntry {
                chunk_id,
                doc_id,
                title,
                uri,
                license,
                text,
                vector,
            })
            .map_err(|e| match e {
                IndexError::DuplicateChunk(id) => {
                    IndexError::Validation(format!("duplicate chunk id {id}"))
                }
                other => other,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt_at(
                r.pos,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(builder.finalize())
    }
}

fn mode_byte(mode: CorpusMode) -> u8 {
    match mode {
        CorpusMode::Basic => 0,
        CorpusMode::Research => 1,
    }
}

fn license_byte(license: License) -> u8 {
    match license {
        License::PublicDomain => 0,
        License::CcBy => 1,
        License::CcByNc => 2,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt_at(&self, offset: usize, message: String) -> IndexError {
        IndexError::Corrupt { offset, message }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.corrupt_at(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self) -> Result<i64, IndexError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| self.corrupt_at(at, format!("invalid UTF-8: {e}")))
    }
}
