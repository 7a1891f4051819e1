use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{CitationRecord, CorpusError, CorpusMode, License, SourceDocument};

#[derive(Debug, Deserialize)]
struct CitationRow {
    key: String,
    authors: String,
    year: i32,
    title: String,
    venue: String,
    uri: String,
    license: String,
}

/// Reads the citations CSV (`key,authors,year,title,venue,uri,license`).
pub fn read_citations(path: &Path) -> Result<Vec<CitationRecord>, CorpusError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut records: Vec<CitationRecord> = Vec::new();
    let mut keys = HashMap::new();
    for row in reader.deserialize::<CitationRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = records.len() as u64 + 2;
        let license: License = row.license.parse().map_err(|m| CorpusError::Csv {
            line,
            message: m,
        })?;
        if !license.allowed_for(CorpusMode::Research) {
            return Err(CorpusError::Validation(format!(
                "citation {} has license {license}, expected CC-BY or CC-BY-NC",
                row.key
            )));
        }
        let key = row.key.trim().to_string();
        if key.is_empty() {
            return Err(CorpusError::Csv {
                line,
                message: "empty citation key".into(),
            });
        }
        if keys.insert(key.clone(), line).is_some() {
            return Err(CorpusError::Csv {
                line,
                message: format!("duplicate citation key {key}"),
            });
        }
        records.push(CitationRecord {
            key,
            authors: row.authors,
            year: row.year,
            title: row.title,
            venue: row.venue,
            uri: row.uri,
            license,
        });
    }
    Ok(records)
}

fn csv_error(path: &Path, e: csv::Error) -> CorpusError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CorpusError::io(path, source),
        kind => CorpusError::Csv {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// One Research-mode document per `*.txt` file in `text_dir`, joined to its
/// citation row by file stem. Files are taken in filename order.
pub fn load_research_corpus(
    text_dir: &Path,
    citations_csv: &Path,
) -> Result<Vec<SourceDocument>, CorpusError> {
    let citations: HashMap<String, CitationRecord> = read_citations(citations_csv)?
        .into_iter()
        .map(|c| (c.key.clone(), c))
        .collect();

    let entries = std::fs::read_dir(text_dir).map_err(|e| CorpusError::io(text_dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CorpusError::io(text_dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|ext| ext == "txt") {
            files.push(path);
        }
    }
    files.sort();

    let mut docs = Vec::with_capacity(files.len());
    for (ordinal, path) in files.into_iter().enumerate() {
        let key = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let Some(citation) = citations.get(&key) else {
            return Err(CorpusError::MissingCitation { file: path });
        };
        let body = std::fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
        if body.trim().is_empty() {
            return Err(CorpusError::Validation(format!(
                "{}: empty text",
                path.display()
            )));
        }
        let doc = SourceDocument {
            doc_id: format!("research/{key}"),
            uri: citation.uri.clone(),
            title: citation.title.clone(),
            body,
            license: citation.license,
            mode: CorpusMode::Research,
            ordinal: ordinal as u64,
            citation: Some(citation.clone()),
        };
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}
