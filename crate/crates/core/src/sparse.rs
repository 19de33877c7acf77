//! Tokenization, inverted index and BM25 ranking.
//!
//! Backs `exact_search` (keyword ranking) and `entity_match` (phrase-anchored
//! retrieval with per-sentence snippets).
//!
//! BM25 uses `k1 = 1.2`, `b = 0.75` and the +1-smoothed IDF
//! `ln((N - n_t + 0.5) / (n_t + 0.5) + 1)`, which stays positive for every
//! indexed token.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_sentences, Chunk, ChunkStore};
use crate::rank::top_k;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const SNIPPETS_PER_CHUNK: usize = 3;

const FORMAT_VERSION: u32 = 1;
const INDEX_FILE: &str = "inverted.json";

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("query has no searchable tokens")]
    EmptyQuery,
    #[error("entity has no searchable tokens")]
    EmptyEntity,
    #[error("chunk {0:?} not in index")]
    NotFound(String),
    #[error("index build failed: duplicate chunk_id {0:?}")]
    DuplicateChunk(String),
    #[error("sparse index format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases and splits on every non-alphanumeric character. No stemming,
/// no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|piece| !piece.is_empty()).map(str::to_lowercase).collect()
}

/// Inverse document frequency with +1 smoothing.
pub fn bm25_idf(num_docs: f64, doc_freq: f64) -> f64 {
    ((num_docs - doc_freq + 0.5) / (doc_freq + 0.5) + 1.0).ln()
}

/// Saturated, length-normalized term frequency.
pub fn bm25_tf(tf: f64, doc_len: f64, avg_doc_len: f64) -> f64 {
    let norm = if avg_doc_len > 0.0 { doc_len / avg_doc_len } else { 0.0 };
    tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    version: u32,
    chunk_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseHit {
    pub chunk_id: String,
    pub bm25_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityHit {
    pub hit: SparseHit,
    pub snippets: Vec<String>,
}

impl InvertedIndex {
    pub fn build(chunks: &[Chunk]) -> Result<Self, SparseError> {
        let mut lookup = HashMap::with_capacity(chunks.len());
        let mut chunk_ids = Vec::with_capacity(chunks.len());
        let mut doc_lengths = Vec::with_capacity(chunks.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (ordinal, chunk) in chunks.iter().enumerate() {
            let ordinal = ordinal as u32;
            if lookup.insert(chunk.chunk_id.clone(), ordinal).is_some() {
                return Err(SparseError::DuplicateChunk(chunk.chunk_id.clone()));
            }
            let tokens = tokenize(&chunk.text);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for token in &tokens {
                *counts.entry(token.clone()).or_default() += 1;
            }
            for (token, tf) in counts {
                postings.entry(token).or_default().push(Posting { chunk: ordinal, tf });
            }
            chunk_ids.push(chunk.chunk_id.clone());
            doc_lengths.push(tokens.len() as u32);
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Self { version: FORMAT_VERSION, chunk_ids, doc_lengths, avg_doc_length, postings, lookup })
    }

    pub fn num_chunks(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn chunk_ids(&self) -> &[String] {
        &self.chunk_ids
    }

    pub fn doc_length(&self, chunk_id: &str) -> Option<u32> {
        self.lookup.get(chunk_id).map(|&i| self.doc_lengths[i as usize])
    }

    /// `(chunk_id, term_frequency)` pairs for a token, in chunk order.
    pub fn postings(&self, token: &str) -> impl Iterator<Item = (&str, u32)> {
        self.postings.get(token).into_iter().flatten().map(|p| (self.chunk_ids[p.chunk as usize].as_str(), p.tf))
    }

    pub fn doc_freq(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }

    fn tf_in(&self, token: &str, ordinal: u32) -> u32 {
        self.postings
            .get(token)
            .and_then(|list| list.binary_search_by_key(&ordinal, |p| p.chunk).ok().map(|i| list[i].tf))
            .unwrap_or(0)
    }

    /// Sum of per-token BM25 contributions; tokens absent from the chunk add 0.
    pub fn bm25_score(&self, query_tokens: &[String], chunk_id: &str) -> Result<f64, SparseError> {
        let &ordinal = self.lookup.get(chunk_id).ok_or_else(|| SparseError::NotFound(chunk_id.to_string()))?;
        let n = self.num_chunks() as f64;
        let dl = self.doc_lengths[ordinal as usize] as f64;
        let mut score = 0.0;
        for token in query_tokens {
            let tf = self.tf_in(token, ordinal);
            if tf == 0 {
                continue;
            }
            let df = self.doc_freq(token) as f64;
            score += bm25_idf(n, df) * bm25_tf(tf as f64, dl, self.avg_doc_length);
        }
        Ok(score)
    }

    /// Scores every chunk holding at least one query token.
    fn score_all(&self, query_tokens: &[String]) -> HashMap<u32, f64> {
        let n = self.num_chunks() as f64;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for token in query_tokens {
            let Some(list) = self.postings.get(token) else {
                continue;
            };
            let idf = bm25_idf(n, list.len() as f64);
            for p in list {
                let dl = self.doc_lengths[p.chunk as usize] as f64;
                *scores.entry(p.chunk).or_insert(0.0) += idf * bm25_tf(p.tf as f64, dl, self.avg_doc_length);
            }
        }
        scores
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self.chunk_ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u32)).collect();
    }
}

/// Inverted index plus the chunk texts needed for phrase checks and snippets.
#[derive(Debug, Clone)]
pub struct SparseIndex {
    inverted: InvertedIndex,
    texts: Vec<String>,
}

impl SparseIndex {
    pub fn build(chunks: &[Chunk]) -> Result<Self, SparseError> {
        Ok(Self { inverted: InvertedIndex::build(chunks)?, texts: chunks.iter().map(|c| c.text.clone()).collect() })
    }

    pub fn inverted(&self) -> &InvertedIndex {
        &self.inverted
    }

    /// BM25 keyword ranking over all chunks (or the filtered subset).
    /// Only chunks sharing at least one token with the keywords are returned.
    pub fn exact_search(
        &self,
        keywords: &str,
        k: usize,
        candidate_filter: Option<&HashSet<String>>,
    ) -> Result<Vec<SparseHit>, SparseError> {
        let tokens = tokenize(keywords);
        if tokens.is_empty() {
            return Err(SparseError::EmptyQuery);
        }
        let hits: Vec<SparseHit> = self
            .inverted
            .score_all(&tokens)
            .into_iter()
            .map(|(ordinal, score)| SparseHit {
                chunk_id: self.inverted.chunk_ids[ordinal as usize].clone(),
                bm25_score: score,
            })
            .filter(|h| candidate_filter.is_none_or(|f| f.contains(&h.chunk_id)))
            .collect();
        Ok(top_k(hits, k, |h| (h.chunk_id.as_str(), h.bm25_score)))
    }

    /// Chunks containing the entity's token sequence contiguously, ranked by
    /// BM25 of `query` (or of the entity itself when the query has no tokens),
    /// each with up to three query-ranked sentence snippets.
    pub fn entity_match(
        &self,
        entity: &str,
        query: &str,
        candidate_filter: Option<&HashSet<String>>,
    ) -> Result<Vec<EntityHit>, SparseError> {
        let entity_tokens = tokenize(entity);
        if entity_tokens.is_empty() {
            return Err(SparseError::EmptyEntity);
        }
        let mut ranking_tokens = tokenize(query);
        if ranking_tokens.is_empty() {
            ranking_tokens = entity_tokens.clone();
        }

        // Rarest entity token bounds the candidate set.
        let Some(rarest) = entity_tokens.iter().min_by_key(|t| self.inverted.doc_freq(t)) else {
            return Ok(Vec::new());
        };
        let mut hits = Vec::new();
        for p in self.inverted.postings.get(rarest).into_iter().flatten() {
            let chunk_id = &self.inverted.chunk_ids[p.chunk as usize];
            if candidate_filter.is_some_and(|f| !f.contains(chunk_id)) {
                continue;
            }
            let text = &self.texts[p.chunk as usize];
            if !contains_phrase(&tokenize(text), &entity_tokens) {
                continue;
            }
            let score = self.inverted.bm25_score(&ranking_tokens, chunk_id)?;
            hits.push(EntityHit {
                hit: SparseHit { chunk_id: chunk_id.clone(), bm25_score: score },
                snippets: Vec::new(),
            });
        }
        let n = hits.len();
        let mut hits = top_k(hits, n, |h| (h.hit.chunk_id.as_str(), h.hit.bm25_score));
        for h in &mut hits {
            let ordinal = self.inverted.lookup[&h.hit.chunk_id];
            h.snippets = best_snippets(&self.texts[ordinal as usize], &ranking_tokens, SNIPPETS_PER_CHUNK);
        }
        Ok(hits)
    }

    /// Writes `<dir>/inverted.json`.
    pub fn save(&self, dir: &Path) -> Result<(), SparseError> {
        fs::create_dir_all(dir)?;
        let body = serde_json::to_vec(&self.inverted).map_err(|e| SparseError::Format(e.to_string()))?;
        fs::write(dir.join(INDEX_FILE), body)?;
        Ok(())
    }

    /// Loads a persisted index and re-attaches chunk texts from the store.
    pub fn load(dir: &Path, store: &ChunkStore) -> Result<Self, SparseError> {
        let bytes = fs::read(dir.join(INDEX_FILE))?;
        let mut inverted: InvertedIndex =
            serde_json::from_slice(&bytes).map_err(|e| SparseError::Format(e.to_string()))?;
        if inverted.version != FORMAT_VERSION {
            return Err(SparseError::Format(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                inverted.version
            )));
        }
        inverted.rebuild_lookup();
        let chunks = store.chunks();
        if chunks.len() != inverted.chunk_ids.len()
            || chunks.iter().zip(&inverted.chunk_ids).any(|(c, id)| &c.chunk_id != id)
        {
            return Err(SparseError::Format("index is stale relative to the chunk store".into()));
        }
        Ok(Self { inverted, texts: chunks.iter().map(|c| c.text.clone()).collect() })
    }
}

pub fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// Ranks the chunk's sentences as BM25 micro-documents against the query and
/// returns the best `limit`, ties going to the earlier sentence.
pub fn best_snippets(text: &str, query_tokens: &[String], limit: usize) -> Vec<String> {
    let sentences: Vec<String> = split_sentences(text).iter().map(|s| s.join(" ")).collect();
    if sentences.is_empty() {
        return Vec::new();
    }
    let tokenized: Vec<Vec<String>> = sentences.iter().map(|s| tokenize(s)).collect();
    let n = sentences.len() as f64;
    let avg = tokenized.iter().map(|t| t.len() as f64).sum::<f64>() / n;
    let mut doc_freq: HashMap<&str, usize> = HashMap::new();
    for tokens in &tokenized {
        let unique: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        for t in unique {
            *doc_freq.entry(t).or_default() += 1;
        }
    }
    let mut scored: Vec<(usize, f64)> = tokenized
        .iter()
        .enumerate()
        .map(|(i, tokens)| {
            let dl = tokens.len() as f64;
            let score = query_tokens
                .iter()
                .map(|q| {
                    let tf = tokens.iter().filter(|t| *t == q).count();
                    if tf == 0 {
                        0.0
                    } else {
                        bm25_idf(n, doc_freq[q.as_str()] as f64) * bm25_tf(tf as f64, dl, avg)
                    }
                })
                .sum();
            (i, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(limit).map(|(i, _)| sentences[i].clone()).collect()
}
