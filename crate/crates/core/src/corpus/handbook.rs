//! Handbook page selection and ordering.
//!
//! Content pages live at `<root>/<chapter>/section<N>/<page>.htm`. Anything
//! else in the sitemap (indexes, search pages, images, the sitemap itself)
//! is dropped.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use super::{extract_text, CorpusError, CorpusMode, License, SourceDocument};

pub const DEFAULT_HANDBOOK_ROOT: &str = "https://www.itl.nist.gov/div898/handbook/";

/// Chapter directories in the order the book presents them.
const CHAPTER_ORDER: [&str; 8] = ["eda", "mpc", "ppc", "pmd", "pri", "pmc", "prc", "apr"];

#[derive(Debug, Clone)]
pub struct HandbookLayout {
    pub root: String,
}

impl Default for HandbookLayout {
    fn default() -> Self {
        Self {
            root: DEFAULT_HANDBOOK_ROOT.to_string(),
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
struct PageKey<'a> {
    chapter_rank: usize,
    chapter: &'a str,
    section: u32,
    page: &'a str,
}

impl Ord for PageKey<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.chapter_rank, self.chapter, self.section, self.page).cmp(&(
            other.chapter_rank,
            other.chapter,
            other.section,
            other.page,
        ))
    }
}

impl PartialOrd for PageKey<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn section_number(segment: &str) -> Option<u32> {
    let digits = segment.strip_prefix("section")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl HandbookLayout {
    /// Path of a content page relative to the root, or `None` when the URL
    /// is not a section/subsection page.
    pub fn relative_path<'a>(&self, uri: &'a str) -> Option<&'a str> {
        let rel = uri.strip_prefix(self.root.as_str())?;
        if rel.contains(['?', '#']) || !rel.ends_with(".htm") {
            return None;
        }
        let mut segments = rel.split('/');
        if segments.any(|s| section_number(s).is_some()) && segments.next().is_some() {
            Some(rel)
        } else {
            None
        }
    }

    fn key<'a>(&self, uri: &'a str) -> Option<PageKey<'a>> {
        let rel = self.relative_path(uri)?;
        let segments: Vec<&str> = rel.split('/').collect();
        let section_at = segments.iter().position(|s| section_number(s).is_some())?;
        let chapter = if section_at == 0 { "" } else { segments[section_at - 1] };
        let page = segments.last()?.trim_end_matches(".htm");
        let chapter_rank = CHAPTER_ORDER
            .iter()
            .position(|c| *c == chapter)
            .unwrap_or(CHAPTER_ORDER.len());
        Some(PageKey {
            chapter_rank,
            chapter,
            section: section_number(segments[section_at])?,
            page,
        })
    }

    /// Keeps section/subsection pages, drops duplicates and sorts into book
    /// order: chapter, then section number, then page name.
    pub fn filter_and_order(&self, uris: &[String]) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut keyed: Vec<(PageKey<'_>, &str)> = uris
            .iter()
            .filter(|u| seen.insert(u.as_str()))
            .filter_map(|u| self.key(u).map(|k| (k, u.as_str())))
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        keyed.into_iter().map(|(_, u)| u.to_string()).collect()
    }
}

pub fn filter_and_order_handbook_urls(uris: &[String]) -> Vec<String> {
    HandbookLayout::default().filter_and_order(uris)
}

/// Builds a Basic-mode document from a fetched page. Pages without visible
/// text yield `None`.
pub fn handbook_document(
    layout: &HandbookLayout,
    ordinal: u64,
    uri: &str,
    html: &str,
) -> Option<SourceDocument> {
    let (title, body) = extract_text(html);
    if body.is_empty() {
        return None;
    }
    let rel = layout.relative_path(uri).unwrap_or(uri);
    Some(SourceDocument {
        doc_id: format!("handbook/{rel}"),
        uri: uri.to_string(),
        title: if title.is_empty() { rel.to_string() } else { title },
        body,
        license: License::PublicDomain,
        mode: CorpusMode::Basic,
        ordinal,
        citation: None,
    })
}

/// Loads handbook pages from a local mirror laid out like the site
/// (`<mirror>/<chapter>/section<N>/<page>.htm`). `uris` should already be
/// filtered and ordered.
pub fn load_handbook_mirror(
    layout: &HandbookLayout,
    uris: &[String],
    mirror: &Path,
) -> Result<Vec<SourceDocument>, CorpusError> {
    let mut docs = Vec::with_capacity(uris.len());
    for uri in uris {
        let Some(rel) = layout.relative_path(uri) else {
            continue;
        };
        let path = mirror.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| CorpusError::io(&path, e))?;
        let html = String::from_utf8_lossy(&bytes);
        match handbook_document(layout, docs.len() as u64, uri, &html) {
            Some(doc) => docs.push(doc),
            None => tracing::warn!(%uri, "page has no visible text, skipped"),
        }
    }
    Ok(docs)
}
