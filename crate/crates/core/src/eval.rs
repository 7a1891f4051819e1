//! Evaluation harness: run prompt suites against the service, blind and
//! shuffle answers for raters, and summarize Likert accuracy ratings.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::corpus::CorpusMode;
use crate::service::{AnswerView, ErrorBody, SessionCreated};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

macro_rules! label_enum {
    ($name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                $(if s.trim().eq_ignore_ascii_case($label) {
                    return Ok($name::$variant);
                })+
                Err(format!("unknown {} {:?}", stringify!($name), s))
            }
        }

        impl TryFrom<String> for $name {
            type Error = String;

            fn try_from(s: String) -> Result<Self, String> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_enum!(PromptType {
    Explanation => "Explanation",
    Application => "Application",
    Evaluation => "Evaluation",
});

label_enum!(Grounded {
    Yes => "Yes",
    Partially => "Partially",
    No => "No",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: u32,
    pub text: String,
    pub mode: CorpusMode,
    #[serde(rename = "type")]
    pub kind: PromptType,
    pub grounded: Grounded,
}

/// Reads a `id,text,mode,type,grounded` CSV.
pub fn read_prompts(path: &Path) -> Result<Vec<PromptSpec>, EvalError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut prompts: Vec<PromptSpec> = Vec::new();
    let mut seen = HashSet::new();
    for result in reader.deserialize::<PromptSpec>() {
        let prompt = result.map_err(|e| csv_error(path, e))?;
        if !seen.insert(prompt.id) {
            return Err(EvalError::Validation(format!("duplicate prompt id {}", prompt.id)));
        }
        if prompt.text.trim().is_empty() {
            return Err(EvalError::Validation(format!("prompt {} has empty text", prompt.id)));
        }
        prompts.push(prompt);
    }
    Ok(prompts)
}

fn csv_error(path: &Path, e: csv::Error) -> EvalError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => EvalError::Io {
            path: path.to_path_buf(),
            source: match e.into_kind() {
                csv::ErrorKind::Io(io) => io,
                _ => unreachable!(),
            },
        },
        _ => EvalError::Row {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        },
    }
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One prompt's run against a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt_id: u32,
    pub prompt: String,
    pub mode: CorpusMode,
    pub system: String,
    pub session_id: Option<Uuid>,
    pub response: Option<AnswerView>,
    pub error: Option<String>,
    pub started_at: DateTime<Utc>,
    pub elapsed_ms: u64,
    pub word_count: Option<usize>,
}

impl Transcript {
    pub fn file_name(prompt_id: u32) -> String {
        format!("prompt_{prompt_id}.json")
    }

    pub fn answer(&self) -> Option<&str> {
        self.response.as_ref().map(|r| r.answer.as_str())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub written: Vec<PathBuf>,
    pub failed: Vec<(u32, String)>,
}

/// Client of a running service used by [`run_prompts`].
#[derive(Debug, Clone)]
pub struct ServiceClient {
    client: reqwest::Client,
    base_url: String,
}

impl ServiceClient {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, EvalError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EvalError::Validation(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
        })
    }

    async fn post<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> Result<T, String> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base_url))
            .json(&body)
            .send()
            .await
            .map_err(|e| format!("request failed: {e}"))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| format!("reading response: {e}"))?;
        if !status.is_success() {
            let detail = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(format!("HTTP {}: {detail}", status.as_u16()));
        }
        serde_json::from_str(&text).map_err(|e| format!("bad response: {e}"))
    }

    pub async fn create_session(&self, mode: CorpusMode) -> Result<SessionCreated, String> {
        self.post("/sessions", serde_json::json!({ "mode": mode })).await
    }

    pub async fn send(&self, session: Uuid, text: &str) -> Result<AnswerView, String> {
        self.post(
            &format!("/sessions/{session}/messages"),
            serde_json::json!({ "text": text }),
        )
        .await
    }
}

/// Sends every prompt, in order, to a fresh session of its mode and writes
/// `prompt_<id>.json` per prompt. Failures are recorded in the transcript
/// and the run continues.
pub async fn run_prompts(
    prompts: &[PromptSpec],
    client: &ServiceClient,
    system: &str,
    out_dir: &Path,
) -> Result<RunReport, EvalError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut report = RunReport::default();
    for prompt in prompts {
        let started_at = Utc::now();
        let clock = Instant::now();
        let mut session_id = None;
        let outcome = match client.create_session(prompt.mode).await {
            Ok(created) => {
                session_id = Some(created.session_id);
                client.send(created.session_id, &prompt.text).await
            }
            Err(e) => Err(e),
        };
        let (response, error) = match outcome {
            Ok(answer) => (Some(answer), None),
            Err(e) => {
                tracing::warn!(prompt = prompt.id, error = %e, "prompt failed");
                report.failed.push((prompt.id, e.clone()));
                (None, Some(e))
            }
        };
        let transcript = Transcript {
            prompt_id: prompt.id,
            prompt: prompt.text.clone(),
            mode: prompt.mode,
            system: system.to_string(),
            session_id,
            word_count: response.as_ref().map(|r| word_count(&r.answer)),
            response,
            error,
            started_at,
            elapsed_ms: clock.elapsed().as_millis() as u64,
        };
        let path = out_dir.join(Transcript::file_name(prompt.id));
        let json = serde_json::to_vec_pretty(&transcript).expect("transcript serializes");
        std::fs::write(&path, json).map_err(io_err(&path))?;
        report.written.push(path);
    }
    Ok(report)
}

/// Reads every `prompt_*.json` transcript in `dir`, ordered by prompt id.
pub fn read_transcripts(dir: &Path) -> Result<Vec<Transcript>, EvalError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !(name.starts_with("prompt_") && name.ends_with(".json")) {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let t: Transcript =
            serde_json::from_slice(&bytes).map_err(|source| EvalError::Json { path: path.clone(), source })?;
        out.push(t);
    }
    out.sort_by_key(|t| t.prompt_id);
    Ok(out)
}

/// Answers of one system keyed by prompt id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemAnswers {
    pub system: String,
    pub answers: BTreeMap<u32, String>,
}

#[derive(Debug, Deserialize)]
struct ResponseRow {
    system: String,
    prompt_id: u32,
    answer: String,
}

/// Reads a `system,prompt_id,answer` CSV into per-system answer sets.
pub fn read_responses(path: &Path) -> Result<Vec<SystemAnswers>, EvalError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut by_system: BTreeMap<String, BTreeMap<u32, String>> = BTreeMap::new();
    for result in reader.deserialize::<ResponseRow>() {
        let row = result.map_err(|e| csv_error(path, e))?;
        let answers = by_system.entry(row.system.clone()).or_default();
        if answers.insert(row.prompt_id, row.answer).is_some() {
            return Err(EvalError::Validation(format!(
                "system {} answers prompt {} twice",
                row.system, row.prompt_id
            )));
        }
    }
    Ok(by_system
        .into_iter()
        .map(|(system, answers)| SystemAnswers { system, answers })
        .collect())
}

impl SystemAnswers {
    /// Successful answers from a transcript directory.
    pub fn from_transcripts(system: &str, transcripts: &[Transcript]) -> Self {
        Self {
            system: system.to_string(),
            answers: transcripts
                .iter()
                .filter_map(|t| t.answer().map(|a| (t.prompt_id, a.to_string())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub prompt_id: u32,
    /// 1-based presentation order within the prompt.
    pub position: usize,
    pub code: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedSet {
    pub items: Vec<BlindedItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindKey {
    pub seed: u64,
    pub codes: BTreeMap<String, String>,
}

impl BlindKey {
    pub fn system_for(&self, code: &str) -> Option<&str> {
        self.codes.get(code).map(String::as_str)
    }
}

pub const REDACTED: &str = "[redacted]";
const CODE_ALPHABET: &[u8] = b"ABCDEFGHJKMNPQRSTUVWXYZ23456789";
const CODE_LEN: usize = 6;

/// Replaces every ASCII-case-insensitive occurrence of each label.
fn redact(text: &str, labels: &[String]) -> String {
    let mut out = text.to_string();
    for label in labels {
        let needle = label.to_ascii_lowercase();
        let mut result = String::with_capacity(out.len());
        let hay = out.to_ascii_lowercase();
        let mut last = 0;
        for (i, _) in hay.match_indices(&needle) {
            if i < last {
                continue;
            }
            result.push_str(&out[last..i]);
            result.push_str(REDACTED);
            last = i + needle.len();
        }
        result.push_str(&out[last..]);
        out = result;
    }
    out
}

fn contains_label(text: &str, labels: &[String]) -> bool {
    let hay = text.to_ascii_lowercase();
    labels.iter().any(|l| hay.contains(&l.to_ascii_lowercase()))
}

/// Replaces system labels with random codes and shuffles the presentation
/// order within each prompt. The output depends only on the answer sets
/// (not their input order) and the seed.
pub fn blind_and_shuffle(
    responses: &[SystemAnswers],
    seed: u64,
) -> Result<(BlindedSet, BlindKey), EvalError> {
    if responses.is_empty() {
        return Err(EvalError::Validation("no systems to blind".into()));
    }
    let mut systems: Vec<&SystemAnswers> = responses.iter().collect();
    systems.sort_by(|a, b| a.system.cmp(&b.system));
    for pair in systems.windows(2) {
        if pair[0].system == pair[1].system {
            return Err(EvalError::Validation(format!("system {} listed twice", pair[0].system)));
        }
    }
    if systems.iter().any(|s| s.system.trim().is_empty()) {
        return Err(EvalError::Validation("empty system label".into()));
    }
    let prompt_ids: BTreeSet<u32> = systems[0].answers.keys().copied().collect();
    for s in &systems[1..] {
        let ids: BTreeSet<u32> = s.answers.keys().copied().collect();
        if ids != prompt_ids {
            let missing: Vec<_> = prompt_ids.symmetric_difference(&ids).collect();
            return Err(EvalError::Validation(format!(
                "systems {} and {} cover different prompts (differing ids {missing:?})",
                systems[0].system, s.system
            )));
        }
    }
    let labels: Vec<String> = systems.iter().map(|s| s.system.clone()).collect();
    let redacted_form_leaks = contains_label(REDACTED, &labels);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut items = Vec::with_capacity(prompt_ids.len() * systems.len());
    let mut codes = BTreeMap::new();
    for &prompt_id in &prompt_ids {
        let mut order: Vec<usize> = (0..systems.len()).collect();
        order.shuffle(&mut rng);
        for (position, &si) in order.iter().enumerate() {
            let code = loop {
                let candidate: String = (0..CODE_LEN)
                    .map(|_| CODE_ALPHABET[rng.random_range(0..CODE_ALPHABET.len())] as char)
                    .collect();
                if !contains_label(&candidate, &labels) && used.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let answer = redact(&systems[si].answers[&prompt_id], &labels);
            if redacted_form_leaks || contains_label(&answer, &labels) {
                return Err(EvalError::Validation(format!(
                    "cannot remove system labels from prompt {prompt_id}"
                )));
            }
            codes.insert(code.clone(), systems[si].system.clone());
            items.push(BlindedItem {
                prompt_id,
                position: position + 1,
                code,
                answer,
            });
        }
    }
    Ok((BlindedSet { items }, BlindKey { seed, codes }))
}

/// Accuracy on the 1–5 scale, or NA when the rater could not judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accuracy {
    Na,
    Score(u8),
}

impl FromStr for Accuracy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("NA") {
            return Ok(Accuracy::Na);
        }
        match s.parse::<u8>() {
            Ok(v @ 1..=5) => Ok(Accuracy::Score(v)),
            _ => Err(format!("accuracy {s:?} is not NA or an integer 1-5")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub prompt_id: u32,
    pub rater_id: String,
    pub system: String,
    pub accuracy: Accuracy,
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    prompt_id: String,
    rater_id: String,
    system: String,
    accuracy: String,
}

/// Reads a `prompt_id,rater_id,system,accuracy` CSV.
pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_ratings(&text).map_err(|e| match e {
        EvalError::Row { line, message, .. } => EvalError::Row {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

pub fn parse_ratings(text: &str) -> Result<Vec<RatingRecord>, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let row_err = |line: u64, message: String| EvalError::Row {
        path: PathBuf::from("<ratings>"),
        line,
        message,
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let headers = reader
        .headers()
        .map_err(|e| row_err(1, e.to_string()))?
        .clone();
    for result in reader.records() {
        let record = result.map_err(|e| row_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: RatingRow = record
            .deserialize(Some(&headers))
            .map_err(|e| row_err(line, e.to_string()))?;
        let prompt_id = row
            .prompt_id
            .parse()
            .map_err(|_| row_err(line, format!("prompt_id {:?} is not an integer", row.prompt_id)))?;
        if row.system.is_empty() || row.rater_id.is_empty() {
            return Err(row_err(line, "empty system or rater_id".into()));
        }
        let accuracy = row.accuracy.parse().map_err(|m| row_err(line, m))?;
        if !seen.insert((prompt_id, row.rater_id.clone(), row.system.clone())) {
            return Err(row_err(line, "duplicate (prompt_id, rater_id, system)".into()));
        }
        out.push(RatingRecord {
            prompt_id,
            rater_id: row.rater_id,
            system: row.system,
            accuracy,
        });
    }
    Ok(out)
}

/// Standard deviation denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdConvention {
    /// `n - 1`
    #[default]
    Sample,
    /// `n`
    Population,
}

impl FromStr for SdConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sample" => Ok(SdConvention::Sample),
            "population" => Ok(SdConvention::Population),
            other => Err(format!("unknown sd convention {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Zero when undefined (n < 2 for the sample convention).
    pub sd: f64,
    pub sd_undefined: bool,
}

/// Mean and standard deviation of integer data, computed from exact
/// integer sums so the result does not depend on the order of `values`.
pub fn moments(values: &[u64], convention: SdConvention) -> Option<Moments> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let sum: u128 = values.iter().map(|&v| v as u128).sum();
    let sum_sq: u128 = values.iter().map(|&v| (v as u128) * (v as u128)).sum();
    let nn = n as u128;
    let centered = nn * sum_sq - sum * sum;
    let denom = match convention {
        SdConvention::Sample => nn * (nn - 1),
        SdConvention::Population => nn * nn,
    };
    let (sd, sd_undefined) = if denom == 0 {
        (0.0, true)
    } else {
        ((centered as f64 / denom as f64).sqrt(), false)
    };
    Some(Moments {
        n,
        mean: sum as f64 / n as f64,
        sd,
        sd_undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub system: String,
    pub mean_accuracy: Option<f64>,
    pub sd_accuracy: Option<f64>,
    /// Ratings excluding NA.
    pub n_ratings: usize,
    pub n_na: usize,
    pub sd_undefined: bool,
    pub mean_words: Option<f64>,
    pub sd_words: Option<f64>,
    pub n_prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sd_convention: SdConvention,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, system: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.system == system)
    }
}

/// Per-system accuracy statistics (NA excluded), plus answer word counts
/// when transcripts are supplied (`system -> word counts`).
pub fn summarize(
    ratings: &[RatingRecord],
    word_counts: Option<&BTreeMap<String, Vec<usize>>>,
    convention: SdConvention,
) -> Summary {
    let mut by_system: BTreeMap<&str, (Vec<u64>, usize, BTreeSet<u32>)> = BTreeMap::new();
    for r in ratings {
        let entry = by_system.entry(r.system.as_str()).or_default();
        entry.2.insert(r.prompt_id);
        match r.accuracy {
            Accuracy::Score(v) => entry.0.push(v as u64),
            Accuracy::Na => entry.1 += 1,
        }
    }
    let rows = by_system
        .into_iter()
        .map(|(system, (scores, n_na, prompts))| {
            let acc = moments(&scores, convention);
            let words = word_counts
                .and_then(|w| w.get(system))
                .and_then(|w| moments(&w.iter().map(|&c| c as u64).collect::<Vec<_>>(), convention));
            SummaryRow {
                system: system.to_string(),
                mean_accuracy: acc.map(|m| m.mean),
                sd_accuracy: acc.map(|m| m.sd),
                n_ratings: scores.len(),
                n_na,
                sd_undefined: acc.is_none_or(|m| m.sd_undefined),
                mean_words: words.map(|m| m.mean),
                sd_words: words.map(|m| m.sd),
                n_prompts: prompts.len(),
            }
        })
        .collect();
    Summary {
        sd_convention: convention,
        rows,
    }
}

/// `system -> word counts` from transcript files.
pub fn word_counts(transcripts: &[Transcript]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for t in transcripts {
        if let Some(answer) = t.answer() {
            out.entry(t.system.clone()).or_default().push(word_count(answer));
        }
    }
    out
}
