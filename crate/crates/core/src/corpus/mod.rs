//! Grounding corpora: handbook web pages and research-paper texts, both
//! normalised into [`SourceDocument`] records.

mod handbook;
mod html;
mod research;
mod sitemap;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use handbook::{
    filter_and_order_handbook_urls, handbook_document, load_handbook_mirror, HandbookLayout,
    DEFAULT_HANDBOOK_ROOT,
};
pub use html::extract_text;
pub use research::{load_research_corpus, read_citations};
pub use sitemap::{parse_sitemap, write_sitemap};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("sitemap schema error: {0}")]
    Schema(String),
    #[error("no citation row for {}", file.display())]
    MissingCitation { file: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("citations CSV line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("corpus file line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid document: {0}")]
    Validation(String),
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Which grounding corpus a document (and everything derived from it) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    Basic,
    Research,
}

impl CorpusMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusMode::Basic => "basic",
            CorpusMode::Research => "research",
        }
    }
}

impl fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "basic" => Ok(CorpusMode::Basic),
            "research" => Ok(CorpusMode::Research),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum License {
    PublicDomain,
    #[serde(rename = "CC-BY")]
    CcBy,
    #[serde(rename = "CC-BY-NC")]
    CcByNc,
}

impl License {
    pub fn as_str(self) -> &'static str {
        match self {
            License::PublicDomain => "PublicDomain",
            License::CcBy => "CC-BY",
            License::CcByNc => "CC-BY-NC",
        }
    }

    /// Licenses a document of the given mode may carry.
    pub fn allowed_for(self, mode: CorpusMode) -> bool {
        match mode {
            CorpusMode::Basic => self == License::PublicDomain,
            CorpusMode::Research => matches!(self, License::CcBy | License::CcByNc),
        }
    }
}

impl fmt::Display for License {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for License {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "PublicDomain" => Ok(License::PublicDomain),
            "CC-BY" => Ok(License::CcBy),
            "CC-BY-NC" => Ok(License::CcByNc),
            other => Err(format!("unsupported license {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationRecord {
    pub key: String,
    pub authors: String,
    pub year: i32,
    pub title: String,
    pub venue: String,
    pub uri: String,
    pub license: License,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub uri: String,
    pub title: String,
    pub body: String,
    pub license: License,
    pub mode: CorpusMode,
    /// Position in reading order (book order for the handbook).
    pub ordinal: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation: Option<CitationRecord>,
}

impl SourceDocument {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.doc_id.is_empty() {
            return Err(CorpusError::Validation("empty doc_id".into()));
        }
        if self.body.is_empty() {
            return Err(CorpusError::Validation(format!(
                "{}: empty body",
                self.doc_id
            )));
        }
        if !self.license.allowed_for(self.mode) {
            return Err(CorpusError::Validation(format!(
                "{}: license {} not allowed in {} mode",
                self.doc_id, self.license, self.mode
            )));
        }
        if let Some(citation) = &self.citation {
            if citation.license != self.license {
                return Err(CorpusError::Validation(format!(
                    "{}: citation license {} differs from document license {}",
                    self.doc_id, citation.license, self.license
                )));
            }
        }
        Ok(())
    }
}

/// Checks per-document invariants plus doc_id uniqueness across the corpus.
pub fn validate_corpus(docs: &[SourceDocument]) -> Result<(), CorpusError> {
    let mut seen = std::collections::HashSet::new();
    for doc in docs {
        doc.validate()?;
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(CorpusError::Validation(format!(
                "duplicate doc_id {}",
                doc.doc_id
            )));
        }
    }
    Ok(())
}

/// Writes one JSON document per line.
pub fn write_jsonl(path: &Path, docs: &[SourceDocument]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(out, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SourceDocument>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: SourceDocument =
            serde_json::from_str(&line).map_err(|source| CorpusError::Json {
                line: i + 1,
                source,
            })?;
        docs.push(doc);
    }
    validate_corpus(&docs)?;
    Ok(docs)
}
