//! Exit criteria. Each test prints one `criterion N ... PASS|FAIL` line
//! straight to stdout so the verdicts survive output capture.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use groundchat::chunker::{split_document, split_spans, Chunk, ChunkingPolicy, Span};
use groundchat::corpus::{CorpusMode, License};
use groundchat::costing::{embedding_corpus_cost, monthly_query_cost, PricingTable};
use groundchat::embed::{estimate_tokens, mock_embed, EmbeddingVector};
use groundchat::eval::{blind_and_shuffle, read_ratings, summarize, SdConvention, SystemAnswers};
use groundchat::index::{IndexBuilder, VectorIndex};
use groundchat::rag::{is_refusal, PromptTemplate, BASIC_REFUSAL};
use groundchat::service::{build_state, run, ServiceConfig};

use common::{fixtures, handbook_docs, spawn_stub_llm, test_config, StubLlm};

fn verdict(n: u8, name: &str, outcome: Result<String, String>) {
    let line = match &outcome {
        Ok(detail) => format!("criterion {n} {name}: PASS ({detail})\n"),
        Err(why) => format!("criterion {n} {name}: FAIL ({why})\n"),
    };
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    if let Err(why) = outcome {
        panic!("criterion {n} failed: {why}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

#[test]
fn criterion_1_cost_goldens() {
    let started = Instant::now();
    let outcome = (|| {
        let pricing = PricingTable::default();
        let embed = embedding_corpus_cost(1_300_000, &pricing);
        check(embed == Decimal::new(13, 2), || format!("corpus embedding cost {embed}"))?;
        let monthly = monthly_query_cost(2000, 250, 2000, 1000, &pricing);
        let got = (monthly.input_usd, monthly.output_usd, monthly.total_usd);
        let want = (Decimal::from(5), Decimal::from(60), Decimal::from(65));
        check(got == want, || format!("monthly {got:?}, want {want:?}"))?;
        within(started.elapsed(), Duration::from_secs(1))?;
        Ok(format!("$0.13; $5 + $60 = $65 in {:?}", started.elapsed()))
    })();
    verdict(1, "cost goldens", outcome);
}

const ALPHABET: &[char] = &['a', 'b', 'c', 'x', 'y', 'z', 'é', 'ß', 'Ω', '漢', '0', '9', '.', ','];

fn random_document(rng: &mut ChaCha8Rng) -> Vec<char> {
    let len = rng.random_range(0..=20_000usize);
    let mut doc = Vec::with_capacity(len + 3000);
    while doc.len() < len {
        match rng.random_range(0..100) {
            0..=59 => {
                let word = rng.random_range(1..=12);
                doc.extend((0..word).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]));
            }
            60..=84 => doc.push(' '),
            85..=93 => doc.push('\n'),
            94..=97 => doc.extend(['\n', '\n']),
            _ => {
                let run = rng.random_range(500..3000);
                doc.extend((0..run).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]));
            }
        }
    }
    doc.truncate(len);
    doc
}

fn chunk_properties(doc: &[char], spans: &[Span], max: usize) -> Result<(), String> {
    if doc.is_empty() {
        return check(spans.is_empty(), || "empty document produced chunks".into());
    }
    check(spans.first().map(|s| s.start) == Some(0), || "first span does not start at 0".into())?;
    check(spans.last().map(|s| s.end) == Some(doc.len()), || "last span does not end at len".into())?;
    for s in spans {
        check(s.end - s.start <= max, || format!("span {s:?} longer than {max}"))?;
        check(s.start < s.end, || format!("empty span {s:?}"))?;
    }
    for w in spans.windows(2) {
        check(w[1].start > w[0].start, || format!("starts not increasing at {:?}", w[1]))?;
        check(w[1].start <= w[0].end, || format!("gap between {:?} and {:?}", w[0], w[1]))?;
    }
    Ok(())
}

#[test]
fn criterion_2_chunker_properties() {
    let started = Instant::now();
    let outcome = (|| {
        let policy = ChunkingPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        let mut chunks = 0;
        for i in 0..1000 {
            let doc = random_document(&mut rng);
            let spans = split_spans(&doc, &policy);
            chunk_properties(&doc, &spans, 1000).map_err(|e| format!("document {i}: {e}"))?;
            chunks += spans.len();
        }

        let flat: Vec<char> = "a".repeat(2500).chars().collect();
        let spans: Vec<(usize, usize)> = split_spans(&flat, &policy).iter().map(|s| (s.start, s.end)).collect();
        let want = [(0, 1000), (900, 1900), (1800, 2500)];
        check(spans == want, || format!("stride spans {spans:?}, want {want:?}"))?;

        within(started.elapsed(), Duration::from_secs(10))?;
        Ok(format!("1000 documents, {chunks} chunks, stride exact, {:?}", started.elapsed()))
    })();
    verdict(2, "chunker properties", outcome);
}

fn chunk(id: String, mode: CorpusMode) -> Chunk {
    Chunk {
        chunk_id: id.clone(),
        doc_id: id.clone(),
        span: Span { start: 0, end: id.chars().count() },
        text: id,
        title: "t".into(),
        uri: "https://example.org/".into(),
        license: License::PublicDomain,
        mode,
    }
}

/// `x * 2^149` as an exact integer; every finite f32 is a multiple of 2^-149.
fn scaled(x: f32) -> BigInt {
    let bits = x.to_bits();
    let exp = ((bits >> 23) & 0xff) as i32;
    let frac = (bits & 0x7f_ffff) as i64;
    let (mantissa, shift) = if exp == 0 { (frac, 0) } else { (frac | 0x80_0000, exp - 1) };
    let magnitude = BigInt::from(mantissa) << shift as usize;
    if bits >> 31 == 1 {
        -magnitude
    } else {
        magnitude
    }
}

/// Exact squared distance, scaled by 2^298.
fn exact_square(a: &[f32], b: &[f32]) -> BigInt {
    a.iter().zip(b).fold(BigInt::zero(), |acc, (&x, &y)| {
        let d = scaled(x) - scaled(y);
        acc + &d * &d
    })
}

fn exact_distance(square: &BigInt) -> f64 {
    let root = (square << 128usize).sqrt();
    root.to_f64().unwrap() * 2f64.powi(-213)
}

fn random_f32s(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn widen(v: &[f32]) -> EmbeddingVector {
    EmbeddingVector::new(v.iter().map(|&x| x as f64).collect()).unwrap()
}

#[test]
fn criterion_3_knn_oracle() {
    let started = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        let mut worst = 0f64;
        for dim in [8, 32, 256] {
            let mut stored: Vec<Vec<f32>> = Vec::new();
            for i in 0..200 {
                // Every tenth entry repeats an earlier one to force exact ties.
                let v = if i % 10 == 9 { stored[i - 7].clone() } else { random_f32s(&mut rng, dim) };
                stored.push(v);
            }
            let mut builder = IndexBuilder::new(dim, CorpusMode::Basic, "oracle", ChunkingPolicy::default());
            for (i, v) in stored.iter().enumerate() {
                builder.push(&chunk(format!("c{i}"), CorpusMode::Basic), &widen(v)).map_err(|e| e.to_string())?;
            }
            let index = builder.finalize();

            for q in 0..20 {
                let query: Vec<f64> = if q % 5 == 0 {
                    stored[q * 7 + 2].iter().map(|&x| x as f64).collect()
                } else {
                    (0..dim).map(|_| rng.random_range(-1.0f64..1.0)).collect()
                };
                let narrowed: Vec<f32> = query.iter().map(|&x| x as f32).collect();
                let squares: Vec<BigInt> = stored.iter().map(|v| exact_square(&narrowed, v)).collect();
                let mut order: Vec<usize> = (0..stored.len()).collect();
                order.sort_by(|&a, &b| squares[a].cmp(&squares[b]).then(a.cmp(&b)));

                let query = EmbeddingVector::new(query).unwrap();
                for k in [1, 5, 10] {
                    let hits = index.search(&query, k).map_err(|e| e.to_string())?;
                    let got: Vec<usize> = hits.iter().map(|h| h.position).collect();
                    check(got == order[..k], || format!("dim {dim} query {q} k {k}: {got:?} vs {:?}", &order[..k]))?;
                    for h in &hits {
                        let oracle = exact_distance(&squares[h.position]);
                        let err = (h.distance - oracle).abs();
                        worst = worst.max(err);
                        check(err <= 1e-9, || format!("dim {dim} query {q}: distance {} vs {oracle}", h.distance))?;
                    }
                    checked += 1;
                }
            }
        }
        within(started.elapsed(), Duration::from_secs(10))?;
        Ok(format!("{checked} searches, max |err| {worst:.2e}, {:?}", started.elapsed()))
    })();
    verdict(3, "kNN oracle equivalence", outcome);
}

fn vector_digest(index: &VectorIndex) -> String {
    let mut hasher = Sha256::new();
    for e in index.entries() {
        for v in e.raw_vector() {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

#[test]
fn criterion_4_persistence_round_trip() {
    let outcome = (|| {
        let dim = 48;
        let mut builder = IndexBuilder::new(dim, CorpusMode::Research, "mock-48", ChunkingPolicy::default());
        for i in 0..1000 {
            let c = chunk(format!("entry {i}"), CorpusMode::Research);
            builder.push(&c, &mock_embed(&c.text, dim)).map_err(|e| e.to_string())?;
        }
        let original = builder.finalize();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("round-trip.idx");
        original.save(&path).map_err(|e| e.to_string())?;
        let loaded = VectorIndex::load(&path).map_err(|e| e.to_string())?;

        let (a, b) = (vector_digest(&original), vector_digest(&loaded));
        check(a == b, || format!("vector digests differ: {a} vs {b}"))?;
        check(original.header() == loaded.header(), || "headers differ".into())?;

        let key = |index: &VectorIndex, q: &EmbeddingVector| -> Result<Vec<(usize, u64)>, String> {
            Ok(index
                .search(q, 5)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|h| (h.position, h.distance.to_bits()))
                .collect())
        };
        for p in 0..20 {
            let probe = mock_embed(&format!("probe {p}"), dim);
            check(key(&original, &probe)? == key(&loaded, &probe)?, || format!("probe {p} differs"))?;
        }
        Ok(format!("1000 entries, sha256 {}…, 20 probes identical", &a[..12]))
    })();
    verdict(4, "persistence round-trip", outcome);
}

// System prompts exactly as written in the original Python sources.
const BASIC_PY: &str = r#""You are a Q&A bot, an intelligent system that answers user questions ONLY based on the information provided by the user. When you use the information provided by the user, please include `\\n (Source: NIST/SEMATECH e-Handbook of Statistical Methods)' at the end of your response with a line break. If the information cannot be found in the user information, please say, `As a SQC chatbot grounded only in NIST/SEMATECH's Engineering Statistics Handbook, I do not know the answer to this question as it is not in my referenced/grounding material. I am sorry for not being able to help.' No answers should be made based on your in-house knowledge. For example, you may know what a large language model is, but that information does not come from the knowledge base that we provided to you. So defining a large language model based on your knowledge is unacceptable. Obviously, other algorithms, descriptions, and formulas that are not in the knowledge base we provided are also unacceptable. The context is:\\n{context}.""#;

const RESEARCH_PY: &str = r#""You are a Q&A bot, an intelligent system that answers user questions ONLY based on the information provided by the user. If the information cannot be found in the user information, please say 'As a SQC chatbot grounded only in open-access SQC research papers, I do not know the answer to this question as it is not in my referenced/grounding material. I am sorry for not being able to help.' No answers should be made based on your in-house knowledge. For example, you may know what a large language model is, but that information does not come from the knowledge base that we provided to you. So defining a large language model based on your knowledge is unacceptable. Obviously, other algorithms, descriptions, and formulas that are not in the knowledge base we provided are also unacceptable. The context is:\n{context}.""#;

fn decode_python_literal(src: &str) -> String {
    let body = src.strip_prefix('"').and_then(|s| s.strip_suffix('"')).expect("double-quoted literal");
    let mut out = String::new();
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next().expect("dangling backslash") {
            'n' => out.push('\n'),
            't' => out.push('\t'),
            '\\' => out.push('\\'),
            '\'' => out.push('\''),
            '"' => out.push('"'),
            other => {
                out.push('\\');
                out.push(other);
            }
        }
    }
    out
}

/// The sentence the prompt asks the model to say, between its opening quote
/// (` or ') and the closing '.
fn quoted_refusal(prompt: &str) -> &str {
    let start = prompt.find("please say").unwrap();
    let rest = &prompt[start..];
    let open = rest.find(['`', '\'']).unwrap() + 1;
    let close = rest[open..].find(".'").unwrap() + 1;
    &rest[open..open + close]
}

fn perturbations(sentence: &str) -> impl Iterator<Item = String> + '_ {
    let chars: Vec<char> = sentence.chars().collect();
    (0..chars.len()).flat_map(move |i| {
        let mut swapped = chars.clone();
        swapped[i] = if chars[i] == '#' { '%' } else { '#' };
        let mut dropped = chars.clone();
        dropped.remove(i);
        [swapped.into_iter().collect::<String>(), dropped.into_iter().collect()]
    })
}

#[test]
fn criterion_5_prompt_byte_identity() {
    let outcome = (|| {
        let mut perturbed = 0;
        for (template, source) in [(PromptTemplate::basic(), BASIC_PY), (PromptTemplate::research(), RESEARCH_PY)] {
            let expected = decode_python_literal(source);
            check(template.system_text.as_bytes() == expected.as_bytes(), || {
                format!("{} system prompt differs from its source", template.mode)
            })?;
            let refusal = quoted_refusal(&expected);
            check(template.refusal_sentence == refusal, || format!("{} refusal sentence differs", template.mode))?;
            check(is_refusal(&format!("Sorry. {refusal}"), &template), || "refusal not detected".into())?;
            for variant in perturbations(refusal) {
                check(!is_refusal(&variant, &template), || format!("perturbation accepted: {variant}"))?;
                perturbed += 1;
            }
        }
        let basic = PromptTemplate::basic();
        let suffix = "please include `\\n (Source: NIST/SEMATECH e-Handbook of Statistical Methods)' at the end";
        check(basic.system_text.contains(suffix), || "source-suffix instruction missing".into())?;
        check(
            basic.source_suffix.as_deref() == Some("(Source: NIST/SEMATECH e-Handbook of Statistical Methods)"),
            || "source suffix differs".into(),
        )?;
        check(basic.system_text.contains("The context is:\\n{context}."), || "basic context slot".into())?;
        check(
            PromptTemplate::research().system_text.contains("The context is:\n{context}."),
            || "research context slot".into(),
        )?;
        Ok(format!("both prompts byte-identical, {perturbed} perturbations rejected"))
    })();
    verdict(5, "prompt byte-identity", outcome);
}

const UNGROUNDED: &str = "Who won the 1998 World Cup?";

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn criterion_6_end_to_end_pipeline() {
    let started = Instant::now();
    let outcome = async {
        let docs = handbook_docs();
        check(docs.len() == 3, || format!("fixture corpus has {} documents", docs.len()))?;
        let policy = ChunkingPolicy::default();
        let dim = 64;
        let mut builder = IndexBuilder::new(dim, CorpusMode::Basic, format!("mock-{dim}"), policy.clone());
        let mut chunks = Vec::new();
        for doc in &docs {
            for c in split_document(doc, &policy) {
                builder.push(&c, &mock_embed(&c.text, dim)).map_err(|e| e.to_string())?;
                chunks.push(c);
            }
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("basic.idx");
        builder.finalize().save(&path).map_err(|e| e.to_string())?;

        let stub = StubLlm {
            replies: [(UNGROUNDED.to_string(), BASIC_REFUSAL.to_string())].into(),
            ..StubLlm::default()
        };
        let (endpoint, _) = spawn_stub_llm(stub).await;
        let mut config: ServiceConfig = test_config(&endpoint);
        config.indices.basic = Some(path);
        config.embed.mock_dim = dim;
        let state = Arc::new(build_state(config).map_err(|e| e.to_string())?);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(run(listener, state, async {
            stopped.await.ok();
        }));

        let http = reqwest::Client::new();
        let ask = |text: String| {
            let http = http.clone();
            let base = base.clone();
            async move {
                let session: Value = http
                    .post(format!("{base}/sessions"))
                    .json(&json!({ "mode": "basic" }))
                    .send()
                    .await
                    .map_err(|e| e.to_string())?
                    .json()
                    .await
                    .map_err(|e| e.to_string())?;
                let id = session["session_id"].as_str().ok_or("no session id")?.to_string();
                let response = http
                    .post(format!("{base}/sessions/{id}/messages"))
                    .json(&json!({ "text": text }))
                    .send()
                    .await
                    .map_err(|e| e.to_string())?;
                let status = response.status();
                let body: Value = response.json().await.map_err(|e| e.to_string())?;
                check(status.is_success(), || format!("status {status}: {body}"))?;
                Ok::<Value, String>(body)
            }
        };

        for c in &chunks {
            let body = ask(c.text.clone()).await?;
            let top = &body["sources"][0];
            check(top["excerpt"] == c.text.as_str(), || format!("{}: top source is another chunk", c.chunk_id))?;
            check(top["l2_distance"] == 0.0, || format!("{}: distance {}", c.chunk_id, top["l2_distance"]))?;
            check(body["refused"] == false, || format!("{}: grounded answer flagged as refusal", c.chunk_id))?;
        }
        let body = ask(UNGROUNDED.to_string()).await?;
        check(body["refused"] == true, || format!("ungrounded query not refused: {body}"))?;

        stop.send(()).ok();
        server.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
        within(started.elapsed(), Duration::from_secs(30))?;
        Ok(format!("{} chunks self-retrieved at distance 0, refusal flagged, {:?}", chunks.len(), started.elapsed()))
    }
    .await;
    verdict(6, "end-to-end pipeline", outcome);
}

const PROMPTS_1_8: &str = "prompts_1_8.csv";
const PROMPT_11: &str = "prompt_11.csv";

fn ratings_dir() -> PathBuf {
    std::env::var_os("GROUNDCHAT_RATINGS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| fixtures().join("published"))
}

/// (system, mean, sd, n, NA count)
type Expected = (&'static str, f64, f64, usize, Option<usize>);

fn compare(file: &str, expected: &[Expected]) -> Result<String, String> {
    let path = ratings_dir().join(file);
    let ratings = read_ratings(&path).map_err(|e| e.to_string())?;
    let summary = summarize(&ratings, None, SdConvention::Sample);
    let mut seen = Vec::new();
    for &(system, mean, sd, n, na) in expected {
        let row = summary.row(system).ok_or_else(|| format!("{file}: no rows for {system}"))?;
        let (m, s) = (row.mean_accuracy.unwrap_or(f64::NAN), row.sd_accuracy.unwrap_or(f64::NAN));
        check((m - mean).abs() <= 0.01 && (s - sd).abs() <= 0.01 && row.n_ratings == n, || {
            format!("{file}: {system} {m:.2} ({s:.2}) n {}, want {mean:.2} ({sd:.2}) n {n}", row.n_ratings)
        })?;
        if let Some(na) = na {
            check(row.n_na == na, || format!("{file}: {system} has {} NA, want {na}", row.n_na))?;
        }
        seen.push(format!("{system} {m:.2} ({s:.2})"));
    }
    Ok(seen.join(", "))
}

#[test]
fn criterion_7_statistics_reproduction() {
    let outcome = (|| {
        let text = vec!["word"; 750].join(" ");
        let tokens = estimate_tokens(&text);
        check(tokens == 1000, || format!("750 words estimated as {tokens} tokens"))?;

        let dir = ratings_dir();
        let missing: Vec<&str> = [PROMPTS_1_8, PROMPT_11].into_iter().filter(|f| !dir.join(f).is_file()).collect();
        check(missing.is_empty(), || {
            format!(
                "750 words -> 1000 tokens ok; published ratings {missing:?} not found in {} (set GROUNDCHAT_RATINGS_DIR)",
                dir.display()
            )
        })?;

        let table3 = compare(
            PROMPTS_1_8,
            &[
                ("ChatSQC-Basic", 4.25, 1.05, 32, None),
                ("GPT-3.5", 4.28, 0.81, 32, None),
                ("GPT-4", 4.44, 0.98, 32, None),
            ],
        )?;
        let table6 = compare(
            PROMPT_11,
            &[
                ("ChatSQC-Research", 3.43, 0.79, 7, None),
                ("GPT-3.5", 3.29, 1.11, 7, None),
                ("GPT-4", 3.75, 0.96, 4, Some(3)),
            ],
        )?;
        Ok(format!("sample sd; {table3}; {table6}; 750 words -> 1000 tokens"))
    })();
    verdict(7, "statistics reproduction", outcome);
}

#[test]
fn criterion_8_blinding_determinism() {
    let outcome = (|| {
        let systems = ["ChatSQC-Basic", "GPT-3.5", "GPT-4"];
        let responses: Vec<SystemAnswers> = systems
            .iter()
            .map(|&system| SystemAnswers {
                system: system.to_string(),
                answers: (1..=8u32)
                    .map(|p| (p, format!("Answer {p}. As {system} ({}) I would say: see chapter {p}.", system.to_lowercase())))
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect();
        let run = || -> Result<String, String> {
            let (set, key) = blind_and_shuffle(&responses, 7).map_err(|e| e.to_string())?;
            check(set.items.len() == 24, || format!("{} items", set.items.len()))?;
            serde_json::to_string(&(set, key.seed)).map_err(|e| e.to_string())
        };
        let first = run()?;
        check(first == run()?, || "seed 7 produced different output".into())?;

        let lowered = first.to_lowercase();
        for label in systems {
            check(!lowered.contains(&label.to_lowercase()), || format!("output contains {label}"))?;
        }
        Ok("seed 7 reproducible, 24 items, no label substrings".into())
    })();
    verdict(8, "blinding determinism", outcome);
}
