//! Embedding providers and the exact (brute-force) cosine index behind
//! `semantic_search`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, ChunkStore};
use crate::rank::top_k;
use crate::sparse::tokenize;

pub const HASHING_DIMENSION: usize = 64;
const MAGIC: &[u8; 4] = b"IRDV";
const FORMAT_VERSION: u32 = 1;
const HEADER_FILE: &str = "header.json";
const VECTORS_FILE: &str = "vectors.bin";
const BUILD_BATCH: usize = 64;

#[derive(Debug, Clone, Error)]
#[error("embedding provider failed: {message}")]
pub struct EmbeddingError {
    pub message: String,
    pub retryable: bool,
}

impl EmbeddingError {
    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: false }
    }

    pub fn retryable(message: impl Into<String>) -> Self {
        Self { message: message.into(), retryable: true }
    }
}

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("query is empty")]
    EmptyQuery,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("cannot build a dense index over zero chunks")]
    NoChunks,
    #[error("dense build aborted after {completed}/{total} chunks: {source}")]
    BuildAborted { completed: usize, total: usize, source: EmbeddingError },
    #[error("provider returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("dense index format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that maps texts to fixed-width vectors. Must be deterministic per
/// text and keep its output dimension constant.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity recorded in index headers, e.g. `hashing-64`.
    fn id(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub unit_norm: bool,
}

impl EmbeddingVector {
    /// L2-normalizes; an all-zero vector stays zero and is flagged non-unit.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self { values, unit_norm: norm > 0.0 }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseHit {
    pub chunk_id: String,
    pub cosine_score: f64,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Deterministic bag-of-tokens embedder: each token adds 1 to bucket
/// `fnv1a64(token) % dimension`.
#[derive(Debug, Clone)]
pub struct HashingProvider {
    dimension: usize,
}

impl HashingProvider {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashingProvider {
    fn default() -> Self {
        Self::new(HASHING_DIMENSION)
    }
}

impl EmbeddingProvider for HashingProvider {
    fn id(&self) -> String {
        format!("hashing-{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = vec![0.0; self.dimension];
                for token in tokenize(text) {
                    v[(fnv1a64(token.as_bytes()) % self.dimension as u64) as usize] += 1.0;
                }
                v
            })
            .collect())
    }
}

/// Embedding service reached over HTTP.
///
/// Request body: `{"model": <model>, "input": [<text>, ...]}`. The response may
/// be either `{"embeddings": [[...], ...]}` or the OpenAI shape
/// `{"data": [{"index": i, "embedding": [...]}, ...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingProvider {
    url: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    #[serde(default)]
    embeddings: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    data: Option<Vec<EmbedDatum>>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpEmbeddingProvider {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dimension: usize, api_key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build();
        Self { url: url.into(), model: model.into(), dimension, api_key, agent: config.into() }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> String {
        format!("http:{}:{}", self.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut request = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(EmbedRequest { model: &self.model, input: texts })
            .map_err(|e| EmbeddingError::retryable(e.to_string()))?;
        let status = response.status().as_u16();
        if status >= 400 {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            let message = format!("HTTP {status}: {body}");
            return Err(if status >= 500 || status == 429 {
                EmbeddingError::retryable(message)
            } else {
                EmbeddingError::fatal(message)
            });
        }
        let parsed: EmbedResponse =
            response.body_mut().read_json().map_err(|e| EmbeddingError::fatal(format!("bad response body: {e}")))?;
        let vectors = match (parsed.embeddings, parsed.data) {
            (Some(v), _) => v,
            (None, Some(mut data)) => {
                data.sort_by_key(|d| d.index.unwrap_or(usize::MAX));
                data.into_iter().map(|d| d.embedding).collect()
            }
            (None, None) => return Err(EmbeddingError::fatal("response has no embeddings")),
        };
        if vectors.len() != texts.len() {
            return Err(EmbeddingError::fatal(format!("expected {} vectors, got {}", texts.len(), vectors.len())));
        }
        Ok(vectors)
    }
}

/// Embeds one text and L2-normalizes it.
pub fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector, DenseError> {
    if text.trim().is_empty() {
        return Err(DenseError::EmptyQuery);
    }
    let mut out = provider.embed_batch(&[text])?;
    let values = out.pop().ok_or_else(|| EmbeddingError::fatal("provider returned nothing"))?;
    if values.len() != provider.dimension() {
        return Err(DenseError::Dimension { expected: provider.dimension(), got: values.len() });
    }
    Ok(EmbeddingVector::normalized(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DenseHeader {
    format_version: u32,
    provider_id: String,
    dimension: usize,
    count: usize,
}

/// Unit vectors for every chunk, row-major, aligned with the chunk store order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    provider_id: String,
    dimension: usize,
    chunk_ids: Vec<String>,
    vectors: Vec<f64>,
}

impl DenseIndex {
    pub fn build(chunks: &[Chunk], provider: &dyn EmbeddingProvider) -> Result<Self, DenseError> {
        if chunks.is_empty() {
            return Err(DenseError::NoChunks);
        }
        let dimension = provider.dimension();
        let mut vectors = Vec::with_capacity(chunks.len() * dimension);
        for (batch_no, batch) in chunks.chunks(BUILD_BATCH).enumerate() {
            let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
            let completed = batch_no * BUILD_BATCH;
            let embedded = provider.embed_batch(&texts).map_err(|source| DenseError::BuildAborted {
                completed,
                total: chunks.len(),
                source,
            })?;
            if embedded.len() != batch.len() {
                return Err(DenseError::BuildAborted {
                    completed,
                    total: chunks.len(),
                    source: EmbeddingError::fatal("provider returned a short batch"),
                });
            }
            for v in embedded {
                if v.len() != dimension {
                    return Err(DenseError::Dimension { expected: dimension, got: v.len() });
                }
                vectors.extend(EmbeddingVector::normalized(v).values);
            }
        }
        Ok(Self {
            provider_id: provider.id(),
            dimension,
            chunk_ids: chunks.iter().map(|c| c.chunk_id.clone()).collect(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.chunk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunk_ids.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn vector(&self, chunk_id: &str) -> Option<&[f64]> {
        let i = self.chunk_ids.iter().position(|id| id == chunk_id)?;
        Some(&self.vectors[i * self.dimension..(i + 1) * self.dimension])
    }

    /// Exact cosine top-k over all (or the filtered) chunks.
    pub fn semantic_search(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        k: usize,
        candidate_filter: Option<&HashSet<String>>,
    ) -> Result<Vec<DenseHit>, DenseError> {
        if provider.id() != self.provider_id {
            return Err(DenseError::Format(format!(
                "index built with provider {:?}, queried with {:?}",
                self.provider_id,
                provider.id()
            )));
        }
        let q = embed(provider, query)?;
        Ok(self.search_vector(&q, k, candidate_filter))
    }

    pub fn search_vector(
        &self,
        query: &EmbeddingVector,
        k: usize,
        candidate_filter: Option<&HashSet<String>>,
    ) -> Vec<DenseHit> {
        let hits: Vec<DenseHit> = self
            .chunk_ids
            .iter()
            .zip(self.vectors.chunks_exact(self.dimension))
            .filter(|(id, _)| candidate_filter.is_none_or(|f| f.contains(*id)))
            .map(|(id, v)| DenseHit { chunk_id: id.clone(), cosine_score: dot(&query.values, v) })
            .collect();
        top_k(hits, k, |h| (h.chunk_id.as_str(), h.cosine_score))
    }

    /// Writes `header.json` and `vectors.bin` under `dir`.
    ///
    /// `vectors.bin`: magic `IRDV`, u32 version, u32 dimension, u64 count, then
    /// per chunk a u32 id length, the UTF-8 id and `dimension` f64 values, all
    /// little-endian.
    pub fn save(&self, dir: &Path) -> Result<(), DenseError> {
        fs::create_dir_all(dir)?;
        let header = DenseHeader {
            format_version: FORMAT_VERSION,
            provider_id: self.provider_id.clone(),
            dimension: self.dimension,
            count: self.len(),
        };
        let header = serde_json::to_string_pretty(&header).map_err(|e| DenseError::Format(e.to_string()))?;
        fs::write(dir.join(HEADER_FILE), header + "\n")?;

        let mut buf = Vec::with_capacity(20 + self.vectors.len() * 8 + self.len() * 16);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in self.chunk_ids.iter().zip(self.vectors.chunks_exact(self.dimension)) {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(dir.join(VECTORS_FILE), buf)?;
        Ok(())
    }

    pub fn load(dir: &Path, store: &ChunkStore) -> Result<Self, DenseError> {
        let header: DenseHeader = serde_json::from_str(&fs::read_to_string(dir.join(HEADER_FILE))?)
            .map_err(|e| DenseError::Format(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(DenseError::Format(format!("unsupported version {}", header.format_version)));
        }
        let bytes = fs::read(dir.join(VECTORS_FILE))?;
        let mut reader = ByteReader { bytes: &bytes, pos: 0 };
        if reader.take(4)? != MAGIC {
            return Err(DenseError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(reader.array()?);
        let dimension = u32::from_le_bytes(reader.array()?) as usize;
        let count = u64::from_le_bytes(reader.array()?) as usize;
        if version != header.format_version || dimension != header.dimension || count != header.count {
            return Err(DenseError::Format("header and vector file disagree".into()));
        }
        let mut chunk_ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dimension);
        for _ in 0..count {
            let len = u32::from_le_bytes(reader.array()?) as usize;
            let id = std::str::from_utf8(reader.take(len)?).map_err(|e| DenseError::Format(e.to_string()))?;
            chunk_ids.push(id.to_string());
            for _ in 0..dimension {
                vectors.push(f64::from_le_bytes(reader.array()?));
            }
        }
        if reader.pos != bytes.len() {
            return Err(DenseError::Format("trailing bytes in vector file".into()));
        }
        let chunks = store.chunks();
        if chunks.len() != chunk_ids.len() || chunks.iter().zip(&chunk_ids).any(|(c, id)| &c.chunk_id != id) {
            return Err(DenseError::Format("index is stale relative to the chunk store".into()));
        }
        Ok(Self { provider_id: header.provider_id, dimension, chunk_ids, vectors })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DenseError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DenseError::Format("truncated vector file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DenseError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
