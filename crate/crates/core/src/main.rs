use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rust_decimal::Decimal;
use tracing_subscriber::EnvFilter;

use groundchat::chunker::{split_document, ChunkingPolicy};
use groundchat::corpus::{
    load_handbook_mirror, load_research_corpus, parse_sitemap, read_jsonl, validate_corpus,
    write_jsonl, HandbookLayout, DEFAULT_HANDBOOK_ROOT,
};
use groundchat::costing::{embedding_corpus_cost, PricingTable};
use groundchat::embed::{estimate_tokens, EmbedConfig, Embedder, MockEmbedder, RemoteEmbedder};
use groundchat::eval::{
    blind_and_shuffle, read_prompts, read_ratings, read_responses, read_transcripts, run_prompts,
    summarize, word_counts, SdConvention, ServiceClient, SystemAnswers,
};
use groundchat::index::{IndexBuilder, VectorIndex};
use groundchat::retry::Secret;
use groundchat::service::{self, ServiceConfig, StartupError};

#[derive(Parser)]
#[command(name = "groundchat", version, about = "Grounded retrieval-augmented chat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a raw corpus into a JSON-lines document file.
    #[command(subcommand)]
    Ingest(Ingest),
    /// Chunk and embed a document file into an index file.
    BuildIndex(BuildIndex),
    /// Run the HTTP chat service.
    Serve(Serve),
    /// Print an index header as JSON.
    DumpIndex {
        path: PathBuf,
    },
    /// Evaluation harness.
    #[command(subcommand)]
    Eval(Eval),
}

#[derive(Subcommand)]
enum Ingest {
    /// Handbook pages listed in a sitemap, read from a local mirror.
    Handbook {
        #[arg(long)]
        sitemap: PathBuf,
        #[arg(long)]
        mirror: PathBuf,
        #[arg(long, default_value = DEFAULT_HANDBOOK_ROOT)]
        root: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain-text papers joined to a citations CSV.
    Research {
        #[arg(long)]
        texts: PathBuf,
        #[arg(long)]
        citations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedKind {
    Mock,
    Remote,
}

#[derive(Args)]
struct BuildIndex {
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "remote")]
    embed: EmbedKind,
    #[arg(long, default_value_t = 64)]
    mock_dim: usize,
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 1000)]
    max_chars: usize,
    #[arg(long, default_value_t = 100)]
    overlap: usize,
    /// USD per 1,000 embedding tokens.
    #[arg(long, default_value = "0.0001")]
    embed_price: Decimal,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bind: Option<SocketAddr>,
    #[arg(long)]
    basic_index: Option<PathBuf>,
    #[arg(long)]
    research_index: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Eval {
    /// Send each prompt to a fresh session of a running service.
    Run {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        target: String,
        #[arg(long)]
        out: PathBuf,
        /// Label recorded in every transcript.
        #[arg(long, default_value = "groundchat")]
        system: String,
        #[arg(long, default_value_t = 180)]
        timeout_secs: u64,
    },
    /// Replace system labels with codes and shuffle presentation order.
    Blind {
        /// CSV with columns system,prompt_id,answer.
        #[arg(long)]
        responses: Option<PathBuf>,
        /// SYSTEM=DIR of transcripts; repeatable.
        #[arg(long = "transcripts", value_parser = parse_labelled_dir)]
        transcripts: Vec<(String, PathBuf)>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
    /// Per-system accuracy and word-count statistics.
    Summarize {
        #[arg(long)]
        ratings: PathBuf,
        /// Transcript directory for word counts; repeatable.
        #[arg(long = "transcripts")]
        transcripts: Vec<PathBuf>,
        #[arg(long, default_value = "sample")]
        sd: SdConvention,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
    },
}

fn parse_labelled_dir(s: &str) -> Result<(String, PathBuf), String> {
    let (label, dir) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SYSTEM=DIR, got {s:?}"))?;
    if label.is_empty() {
        return Err("empty system label".into());
    }
    Ok((label.to_string(), PathBuf::from(dir)))
}

enum Failure {
    Config(String),
    Index(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }

    fn index(e: impl std::fmt::Display) -> Self {
        Failure::Index(e.to_string())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let json = serde_json::to_vec_pretty(value).map_err(Failure::config)?;
    std::fs::write(path, json).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn ingest(cmd: Ingest) -> Result<(), Failure> {
    let (docs, out) = match cmd {
        Ingest::Handbook {
            sitemap,
            mirror,
            root,
            out,
        } => {
            let xml = std::fs::read_to_string(&sitemap)
                .map_err(|e| Failure::config(format!("{}: {e}", sitemap.display())))?;
            let uris = parse_sitemap(&xml).map_err(Failure::config)?;
            let mut root = root;
            if !root.ends_with('/') {
                root.push('/');
            }
            let layout = HandbookLayout { root };
            let ordered = layout.filter_and_order(&uris);
            tracing::info!(listed = uris.len(), kept = ordered.len(), "sitemap filtered");
            (load_handbook_mirror(&layout, &ordered, &mirror).map_err(Failure::config)?, out)
        }
        Ingest::Research {
            texts,
            citations,
            out,
        } => (load_research_corpus(&texts, &citations).map_err(Failure::config)?, out),
    };
    validate_corpus(&docs).map_err(Failure::config)?;
    write_jsonl(&out, &docs).map_err(Failure::config)?;
    println!("{} documents written to {}", docs.len(), out.display());
    Ok(())
}

async fn build_index(cmd: BuildIndex) -> Result<(), Failure> {
    let docs = read_jsonl(&cmd.docs).map_err(Failure::config)?;
    validate_corpus(&docs).map_err(Failure::config)?;
    let mode = match docs.first() {
        Some(d) => d.mode,
        None => return Err(Failure::config("document file is empty")),
    };
    if let Some(d) = docs.iter().find(|d| d.mode != mode) {
        return Err(Failure::config(format!("{} is {} but the corpus is {mode}", d.doc_id, d.mode)));
    }
    let policy = ChunkingPolicy::new(cmd.max_chars, cmd.overlap, ChunkingPolicy::default().separators)
        .map_err(Failure::config)?;
    let pricing = PricingTable {
        embed_usd_per_1k: cmd.embed_price,
        ..PricingTable::default()
    };
    pricing.validate().map_err(Failure::config)?;

    let embedder: Arc<dyn Embedder> = match cmd.embed {
        EmbedKind::Mock => Arc::new(MockEmbedder::new(cmd.mock_dim.max(1))),
        EmbedKind::Remote => {
            let defaults = EmbedConfig::default();
            Arc::new(
                RemoteEmbedder::new(EmbedConfig {
                    endpoint: cmd.embed_endpoint.unwrap_or(defaults.endpoint.clone()),
                    model_id: cmd.embed_model.unwrap_or(defaults.model_id.clone()),
                    api_key: Secret::new(std::env::var(&cmd.api_key_env).unwrap_or_default()),
                    ..defaults
                })
                .map_err(Failure::config)?,
            )
        }
    };

    let chunks: Vec<_> = docs.iter().flat_map(|d| split_document(d, &policy)).collect();
    let tokens: u64 = chunks.iter().map(|c| estimate_tokens(&c.text)).sum();
    let cost = embedding_corpus_cost(tokens, &pricing);
    tracing::info!(documents = docs.len(), chunks = chunks.len(), tokens, "embedding chunks");
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embedder.embed(&texts).await.map_err(Failure::config)?;
    let dim = vectors.first().map(|v| v.dim()).unwrap_or(cmd.mock_dim);

    let mut builder = IndexBuilder::new(dim, mode, embedder.model_id(), policy);
    for (chunk, vector) in chunks.iter().zip(&vectors) {
        builder.push(chunk, vector).map_err(Failure::index)?;
    }
    let index = builder.finalize();
    index.save(&cmd.out).map_err(Failure::index)?;
    println!(
        "{} chunks from {} documents indexed to {} (dim {dim}); estimated {tokens} embedding tokens, ${cost}",
        index.len(),
        docs.len(),
        cmd.out.display()
    );
    Ok(())
}

async fn serve(cmd: Serve) -> Result<(), Failure> {
    let mut config = match &cmd.config {
        Some(path) => ServiceConfig::load(path).map_err(Failure::config)?,
        None => ServiceConfig::default(),
    };
    if let Some(bind) = cmd.bind {
        config.bind = bind;
    }
    if cmd.basic_index.is_some() {
        config.indices.basic = cmd.basic_index;
    }
    if cmd.research_index.is_some() {
        config.indices.research = cmd.research_index;
    }
    service::serve(config).await.map_err(|e| match e {
        StartupError::Index { .. } => Failure::index(e),
        other => Failure::config(other),
    })
}

fn dump_index(path: &Path) -> Result<(), Failure> {
    let index = VectorIndex::load(path).map_err(Failure::index)?;
    let json = serde_json::to_string_pretty(&index.header()).map_err(Failure::index)?;
    println!("{json}");
    Ok(())
}

async fn eval(cmd: Eval) -> Result<(), Failure> {
    match cmd {
        Eval::Run {
            prompts,
            target,
            out,
            system,
            timeout_secs,
        } => {
            let prompts = read_prompts(&prompts).map_err(Failure::config)?;
            let client = ServiceClient::new(&target, Duration::from_secs(timeout_secs)).map_err(Failure::config)?;
            let report = run_prompts(&prompts, &client, &system, &out)
                .await
                .map_err(Failure::config)?;
            println!(
                "{} transcripts written to {}, {} failed",
                report.written.len(),
                out.display(),
                report.failed.len()
            );
            for (id, error) in &report.failed {
                eprintln!("prompt {id}: {error}");
            }
        }
        Eval::Blind {
            responses,
            transcripts,
            seed,
            out,
            key,
        } => {
            let mut sets: Vec<SystemAnswers> = match &responses {
                Some(path) => read_responses(path).map_err(Failure::config)?,
                None => Vec::new(),
            };
            for (label, dir) in &transcripts {
                let ts = read_transcripts(dir).map_err(Failure::config)?;
                sets.push(SystemAnswers::from_transcripts(label, &ts));
            }
            let (blinded, blind_key) = blind_and_shuffle(&sets, seed).map_err(Failure::config)?;
            write_json(&out, &blinded)?;
            write_json(&key, &blind_key)?;
            println!("{} blinded items written to {}", blinded.items.len(), out.display());
        }
        Eval::Summarize {
            ratings,
            transcripts,
            sd,
            format,
        } => {
            let ratings = read_ratings(&ratings).map_err(Failure::config)?;
            let mut all = Vec::new();
            for dir in &transcripts {
                all.extend(read_transcripts(dir).map_err(Failure::config)?);
            }
            let words: Option<BTreeMap<String, Vec<usize>>> =
                (!transcripts.is_empty()).then(|| word_counts(&all));
            let summary = summarize(&ratings, words.as_ref(), sd);
            match format {
                OutputFormat::Json => {
                    println!("{}", serde_json::to_string_pretty(&summary).map_err(Failure::config)?)
                }
                OutputFormat::Table => print_summary(&summary),
            }
        }
    }
    Ok(())
}

fn print_summary(summary: &groundchat::eval::Summary) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    println!("sd convention: {:?}", summary.sd_convention);
    println!(
        "{:<24} {:>14} {:>5} {:>4} {:>16} {:>9}",
        "system", "accuracy", "n", "NA", "words", "prompts"
    );
    for r in &summary.rows {
        let flag = if r.sd_undefined && r.n_ratings > 0 { "*" } else { "" };
        println!(
            "{:<24} {:>14} {:>5} {:>4} {:>16} {:>9}",
            r.system,
            format!("{} ({}){flag}", fmt(r.mean_accuracy), fmt(r.sd_accuracy)),
            r.n_ratings,
            r.n_na,
            format!("{} ({})", fmt(r.mean_words), fmt(r.sd_words)),
            r.n_prompts
        );
    }
    if summary.rows.iter().any(|r| r.sd_undefined && r.n_ratings > 0) {
        println!("* sd undefined for a single rating, reported as 0");
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(cmd) => ingest(cmd),
        Command::BuildIndex(cmd) => build_index(cmd).await,
        Command::Serve(cmd) => serve(cmd).await,
        Command::DumpIndex { path } => dump_index(&path),
        Command::Eval(cmd) => eval(cmd).await,
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            tracing::error!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Index(m)) => {
            tracing::error!("{m}");
            ExitCode::from(2)
        }
    }
}
