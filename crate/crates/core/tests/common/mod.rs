//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use irag_core::agent::{write_trajectory_log, AgentConfig, ScriptedClient, Trajectory};
use irag_core::corpus::{read_documents, ChunkStore, Document};
use irag_core::dense::HashingProvider;
use irag_core::engine::{render_tool_calls, Action, Engine, SessionState};
use irag_core::eval::{load_dataset, run_benchmark, BenchmarkRun, QAExample, RunnerConfig};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn toy_documents() -> Vec<Document> {
    read_documents(&fixture("toy_corpus.jsonl")).expect("toy corpus")
}

pub fn toy_engine() -> Engine {
    let store = ChunkStore::from_documents(toy_documents(), 100).expect("toy store");
    Engine::build(store, Arc::new(HashingProvider::default())).expect("toy engine")
}

pub fn toy_dataset() -> Vec<QAExample> {
    load_dataset(&fixture("toy_qa.jsonl")).expect("toy dataset")
}

pub fn toy_client() -> ScriptedClient {
    let text = std::fs::read_to_string(fixture("toy_scripts.json")).expect("toy scripts");
    ScriptedClient::from_json(&text).expect("toy scripts parse")
}

// ---- oracles, written from the formulas without touching library internals

pub fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Brute-force BM25 (k1 = 1.2, b = 0.75) of every chunk against `query`.
/// Chunks sharing no token with the query are left out.
pub fn oracle_bm25(chunks: &[(String, String)], query: &str) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = chunks.iter().map(|(_, t)| oracle_tokens(t)).collect();
    let n = docs.len() as f64;
    let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n.max(1.0);
    let q = oracle_tokens(query);
    let df: HashMap<&String, f64> =
        q.iter().map(|t| (t, docs.iter().filter(|d| d.contains(t)).count() as f64)).collect();
    let mut out = Vec::new();
    for ((id, _), doc) in chunks.iter().zip(&docs) {
        let mut score = 0.0;
        let mut any = false;
        for t in &q {
            let tf = doc.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            any = true;
            let idf = ((n - df[t] + 0.5) / (df[t] + 0.5) + 1.0).ln();
            let norm = if avg > 0.0 { doc.len() as f64 / avg } else { 0.0 };
            score += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * norm));
        }
        if any {
            out.push((id.clone(), score));
        }
    }
    sort_hits(&mut out);
    out
}

/// Bag-of-tokens embedding with an in-test FNV-1a (64-bit) hash.
pub fn oracle_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in oracle_tokens(text) {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in tok.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        v[(h % dim as u64) as usize] += 1.0;
    }
    v
}

/// Exhaustive cosine scan over raw vectors.
pub fn oracle_cosine(vectors: &[(String, Vec<f64>)], query: &[f64]) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut out: Vec<(String, f64)> = vectors
        .iter()
        .map(|(id, v)| {
            let vn = norm(v);
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            let cos = if vn == 0.0 || qn == 0.0 { 0.0 } else { dot / (vn * qn) };
            (id.clone(), cos)
        })
        .collect();
    sort_hits(&mut out);
    out
}

pub fn sort_hits(hits: &mut [(String, f64)]) {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

// ---- random corpora

const VOCAB: &[&str] = &[
    "river", "film", "death", "jaws", "city", "born", "director", "novel", "war", "release", "date", "music", "album",
    "king", "queen", "island", "mountain", "desert", "valley", "shark", "writer", "actor", "prize", "season", "spring",
    "north", "south", "east", "west", "1976", "2006", "1933", "the", "of", "a", "in",
];

pub fn random_sentence(rng: &mut StdRng, words: usize) -> String {
    let s: Vec<&str> = (0..words).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
    format!("{}.", s.join(" "))
}

/// `num_docs` documents of 1..=`max_sentences` sentences each.
pub fn random_documents(seed: u64, num_docs: usize, max_sentences: usize) -> Vec<Document> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..num_docs)
        .map(|i| {
            let sentences = rng.random_range(1..=max_sentences);
            let text = (0..sentences)
                .map(|_| {
                    let w = rng.random_range(3..12);
                    random_sentence(&mut rng, w)
                })
                .collect::<Vec<_>>()
                .join(" ");
            Document { doc_id: format!("doc{i:04}"), title: String::new(), text }
        })
        .collect()
}

pub fn random_query(rng: &mut StdRng) -> String {
    let n = rng.random_range(1..5);
    (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

pub fn chunk_pairs(store: &ChunkStore) -> Vec<(String, String)> {
    store.chunks().iter().map(|c| (c.chunk_id.clone(), c.text.clone())).collect()
}

pub fn doc_of(store: &ChunkStore) -> HashMap<String, String> {
    store.chunks().iter().map(|c| (c.chunk_id.clone(), c.doc_id.clone())).collect()
}

pub fn random_engine(seed: u64, num_docs: usize, max_sentences: usize) -> Engine {
    let store = ChunkStore::from_documents(random_documents(seed, num_docs, max_sentences), 20).expect("random store");
    Engine::build(store, Arc::new(HashingProvider::default())).expect("random engine")
}

/// A session reached through a random sequence of include/exclude/scale/weight
/// operations over `doc_ids`, alongside the expected final sets computed
/// independently (latest operation on a doc wins).
pub struct RandomSession {
    pub actions: Vec<Action>,
    pub included: Vec<String>,
    pub excluded: Vec<String>,
    pub scale: usize,
}

pub fn random_session(rng: &mut StdRng, doc_ids: &[String]) -> RandomSession {
    let mut last: HashMap<String, bool> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut actions = Vec::new();
    let mut scale = 3usize;
    for _ in 0..rng.random_range(0..8) {
        match rng.random_range(0..4) {
            0 | 1 => {
                let include = rng.random_bool(0.5);
                let ids: Vec<String> =
                    (0..rng.random_range(1..4)).map(|_| doc_ids[rng.random_range(0..doc_ids.len())].clone()).collect();
                for id in &ids {
                    last.insert(id.clone(), include);
                    if !include {
                        order.retain(|d| d != id);
                    } else if !order.contains(id) {
                        order.push(id.clone());
                    }
                }
                actions.push(if include {
                    Action::IncludeDocs { doc_ids: ids }
                } else {
                    Action::ExcludeDocs { doc_ids: ids }
                });
            }
            2 => {
                scale = rng.random_range(1..8);
                actions.push(Action::AdjustScale { n: scale as u64 });
            }
            _ => actions
                .push(Action::WeightedFusion { w_s: rng.random_range(0.0..1.0), w_e: rng.random_range(0.01..1.0) }),
        }
    }
    let mut excluded: Vec<String> = last.iter().filter(|(_, inc)| !**inc).map(|(d, _)| d.clone()).collect();
    excluded.sort();
    RandomSession { actions, included: order, excluded, scale }
}

/// Two or three consecutive words from a random chunk, usable as an entity.
pub fn random_entity(rng: &mut StdRng, store: &ChunkStore) -> String {
    let chunk = &store.chunks()[rng.random_range(0..store.num_chunks())];
    let words = oracle_tokens(&chunk.text);
    let len = rng.random_range(1..=3).min(words.len());
    let start = rng.random_range(0..=words.len() - len);
    words[start..start + len].join(" ")
}

pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let t = oracle_tokens(text);
    let p = oracle_tokens(phrase);
    !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
}

// ---- protocol generators

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9 ]{1,30}",
        any::<String>().prop_filter("non-empty", |s| !s.trim().is_empty()),
        Just("</tool_call> <tool_call>{\"name\":\"x\"}".to_string()),
        Just("quote \" backslash \\ newline \n tab \t".to_string()),
    ]
}

fn arb_weight() -> impl Strategy<Value = f64> {
    prop_oneof![0.0f64..1.0, 0.0f64..1e6, Just(0.5), Just(1.0 / 3.0)]
}

pub fn arb_action() -> impl Strategy<Value = Action> {
    prop_oneof![
        arb_text().prop_map(|query| Action::SemanticSearch { query }),
        arb_text().prop_map(|keywords| Action::ExactSearch { keywords }),
        (arb_weight(), arb_weight()).prop_map(|(w_s, w_e)| Action::WeightedFusion { w_s, w_e }),
        (arb_text(), proptest::option::of(arb_text()))
            .prop_map(|(entity, query)| Action::EntityMatch { entity, query }),
        proptest::collection::vec(arb_text(), 0..4).prop_map(|doc_ids| Action::IncludeDocs { doc_ids }),
        proptest::collection::vec(arb_text(), 0..4).prop_map(|doc_ids| Action::ExcludeDocs { doc_ids }),
        any::<u64>().prop_map(|n| Action::AdjustScale { n }),
        arb_text().prop_map(|text| Action::Answer { text }),
    ]
}

pub fn arb_suite() -> impl Strategy<Value = Vec<Action>> {
    proptest::collection::vec(arb_action(), 1..6)
}

// ---- hermetic end-to-end run

pub const GOLDEN_LOG: &str = "toy_trajectories.golden.jsonl";

pub fn toy_benchmark(workers: usize) -> BenchmarkRun {
    let engine = toy_engine();
    let client = toy_client();
    run_benchmark(
        &toy_dataset(),
        &engine,
        &client,
        &SessionState::default(),
        &RunnerConfig::Agent(AgentConfig::default()),
        workers,
    )
    .expect("benchmark runs")
}

pub fn trajectory_log(run: &BenchmarkRun) -> String {
    let trajs: Vec<Trajectory> = run.trajectories.iter().map(|t| t.clone().expect("episode finished")).collect();
    let mut out = Vec::new();
    write_trajectory_log(&mut out, &trajs).expect("in-memory write");
    String::from_utf8(out).expect("utf-8 log")
}

/// Compares against the checked-in log; `IRAG_BLESS=1` rewrites it instead.
pub fn golden_matches(log: &str) -> Result<(), String> {
    let path = fixture(GOLDEN_LOG);
    if std::env::var_os("IRAG_BLESS").is_some() {
        std::fs::write(&path, log).map_err(|e| e.to_string())?;
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == log {
        return Ok(());
    }
    let line = want
        .lines()
        .zip(log.lines())
        .position(|(a, b)| a != b)
        .unwrap_or(want.lines().count().min(log.lines().count()));
    Err(format!("log differs from {} at line {}", path.display(), line + 1))
}

/// Always searches, never answers.
pub fn stubborn_client() -> ScriptedClient {
    ScriptedClient::new([
        "<think>Keep looking.</think>\n<tool_call>\n{\"name\": \"semantic_search\", \"arguments\": {\"query\": \"death\"}}\n</tool_call>",
    ])
    .repeat_last()
}

// ---- protocol fuzzing

const FRAGMENTS: &[&str] = &[
    "<tool_call>",
    "</tool_call>",
    "<tool_response>",
    "<think>",
    "</think>",
    "<answer>",
    "{",
    "}",
    "[",
    "]",
    "\"",
    ":",
    ",",
    "\\",
    "\\u0000",
    "null",
    "-1",
    "1e999",
    "\"name\"",
    "\"arguments\"",
    "\"answer\"",
    "\"n\": 0",
    "\"doc_ids\": 5",
    "NaN",
    "\u{feff}",
    "é",
    "\n",
];

pub fn seed_payloads() -> Vec<String> {
    let mut out = vec![
        render_tool_calls(&[
            Action::SemanticSearch { query: "release date of The Jaws of Death".into() },
            Action::ExcludeDocs { doc_ids: vec!["hound_of_death".into()] },
            Action::EntityMatch { entity: "The Jaws of Death".into(), query: Some("year".into()) },
        ]),
        render_tool_calls(&[Action::WeightedFusion { w_s: 0.2, w_e: 0.8 }, Action::AdjustScale { n: 2 }]),
        render_tool_calls(&[
            Action::IncludeDocs { doc_ids: vec!["death_valley".into()] },
            Action::ExactSearch { keywords: "1976".into() },
        ]),
        render_tool_calls(&[Action::Answer { text: "Florida".into() }]),
    ];
    let scripts: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("toy_scripts.json")).expect("toy scripts"))
            .expect("json");
    for s in scripts.as_array().expect("array") {
        for r in s["replies"].as_array().expect("replies") {
            out.push(r.as_str().expect("string").to_string());
        }
    }
    out
}

/// One to four random edits: delete, insert a fragment, duplicate or
/// truncate a span, or swap two characters.
pub fn mutate(rng: &mut StdRng, payload: &str) -> String {
    let mut chars: Vec<char> = payload.chars().collect();
    for _ in 0..rng.random_range(1..=4) {
        let len = chars.len();
        let at = if len == 0 { 0 } else { rng.random_range(0..len) };
        match rng.random_range(0..6) {
            0 if len > 0 => {
                let end = (at + rng.random_range(1..8)).min(len);
                chars.drain(at..end);
            }
            1 => {
                let frag = FRAGMENTS[rng.random_range(0..FRAGMENTS.len())];
                chars.splice(at..at, frag.chars());
            }
            2 if len > 0 => {
                let end = (at + rng.random_range(1..40)).min(len);
                let span: Vec<char> = chars[at..end].to_vec();
                chars.splice(end..end, span);
            }
            3 => chars.truncate(at),
            4 if len > 1 => {
                let other = rng.random_range(0..len);
                chars.swap(at, other);
            }
            _ => chars.insert(at, char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?')),
        }
    }
    chars.into_iter().collect()
}

// ---- context shaping

pub fn doc_ids(engine: &Engine) -> Vec<String> {
    engine.store().documents().iter().map(|d| d.doc_id.clone()).collect()
}

pub fn shaped_session(engine: &Engine, rng: &mut StdRng) -> (SessionState, RandomSession) {
    let plan = random_session(rng, &doc_ids(engine));
    let mut session = SessionState::default();
    for a in &plan.actions {
        session = engine.execute_action(&session, a).expect("valid shaping action").0;
    }
    (session, plan)
}

/// Runs one random retrieval (`kind` 0 semantic, 1 exact, 2 entity) in a
/// random session and checks exclusion, inclusion and the result-count bound.
pub fn check_shaping(engine: &Engine, seed: u64, kind: u8) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let (session, plan) = shaped_session(engine, &mut rng);
    if session.included != plan.included
        || session.excluded.iter().ne(plan.excluded.iter())
        || session.scale_n != plan.scale
    {
        return Err(format!("session {session:?} does not match the expected sets"));
    }
    let entity = random_entity(&mut rng, engine.store());
    let action = match kind {
        0 => Action::SemanticSearch { query: random_query(&mut rng) },
        1 => Action::ExactSearch { keywords: random_query(&mut rng) },
        _ => Action::EntityMatch { entity: entity.clone(), query: Some(random_query(&mut rng)) },
    };
    let block = engine.execute_action(&session, &action).map_err(|e| e.to_string())?.1;
    let chunks = block.chunks();
    let surfaced: std::collections::HashSet<&str> = chunks.iter().map(|c| c.doc_id.as_str()).collect();
    if let Some(d) = plan.excluded.iter().find(|d| surfaced.contains(d.as_str())) {
        return Err(format!("excluded {d} surfaced for {action:?}"));
    }
    if chunks.len() > plan.scale + plan.included.len() {
        return Err(format!("{} results exceed {} + {}", chunks.len(), plan.scale, plan.included.len()));
    }
    let is_entity = matches!(action, Action::EntityMatch { .. });
    for d in &plan.included {
        // Entity results only ever hold chunks containing the entity.
        let required = !is_entity || engine.store().chunks_of(d).any(|c| contains_phrase(&c.text, &entity));
        if required && !surfaced.contains(d.as_str()) {
            return Err(format!("included {d} missing for {action:?}"));
        }
    }
    if is_entity {
        if let Some(c) = chunks.iter().find(|c| !contains_phrase(&c.text, &entity)) {
            return Err(format!("{} lacks the entity {entity:?}", c.chunk_id));
        }
    }
    Ok(())
}
