//! Corpus ingestion, sentence-greedy chunking and the on-disk chunk store.
//!
//! A corpus directory holds three line-oriented files:
//!
//! ```text
//! <index_dir>/manifest    JSON CorpusManifest
//! <index_dir>/documents   one JSON Document per line
//! <index_dir>/chunks      one JSON Chunk per line, document order then position
//! ```
//!
//! Every index (sparse, dense) is rebuilt from the chunk store, never from the
//! raw input.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest";
pub const DOCUMENTS_FILE: &str = "documents";
pub const CHUNKS_FILE: &str = "chunks";

pub const DEFAULT_CHUNK_WORDS: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document {0:?} has no text")]
    EmptyDocument(String),
    #[error("target chunk size must be at least one word")]
    InvalidTarget,
    #[error("line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("duplicate doc_id {doc_id:?} on line {line}")]
    DuplicateDocument { doc_id: String, line: usize },
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("corrupt store file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub position: usize,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub num_documents: usize,
    pub num_chunks: usize,
    pub chunk_target_words: usize,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub checksum: String,
}

/// `<doc_id>#<position>`
pub fn chunk_id(doc_id: &str, position: usize) -> String {
    format!("{doc_id}#{position}")
}

/// Splits whitespace-separated words into sentences. A sentence ends at a word
/// whose final character is `.`, `?` or `!` (i.e. the terminator is followed by
/// whitespace or the end of the text).
pub fn split_sentences(text: &str) -> Vec<Vec<&str>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for word in text.split_whitespace() {
        current.push(word);
        if word.ends_with(['.', '?', '!']) {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

/// Greedy sentence packing: a chunk closes as soon as it holds at least
/// `target_words` words. Sentences longer than twice the target are first cut
/// into `target_words`-sized pieces.
pub fn chunk_document(doc: &Document, target_words: usize) -> Result<Vec<Chunk>, CorpusError> {
    if target_words == 0 {
        return Err(CorpusError::InvalidTarget);
    }
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }

    let mut pieces: Vec<&[&str]> = Vec::new();
    let sentences = split_sentences(&doc.text);
    for sentence in &sentences {
        if sentence.len() > 2 * target_words {
            pieces.extend(sentence.chunks(target_words));
        } else {
            pieces.push(sentence);
        }
    }

    let mut chunks = Vec::new();
    let mut buffer: Vec<&str> = Vec::new();
    let flush = |buffer: &mut Vec<&str>, chunks: &mut Vec<Chunk>| {
        let position = chunks.len();
        chunks.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, position),
            doc_id: doc.doc_id.clone(),
            position,
            text: buffer.join(" "),
            word_count: buffer.len(),
        });
        buffer.clear();
    };
    for piece in pieces {
        buffer.extend_from_slice(piece);
        if buffer.len() >= target_words {
            flush(&mut buffer, &mut chunks);
        }
    }
    if !buffer.is_empty() {
        flush(&mut buffer, &mut chunks);
    }
    Ok(chunks)
}

/// Checksum over chunk ids and texts in store order.
pub fn corpus_checksum(chunks: &[Chunk]) -> String {
    let mut hasher = Sha256::new();
    for chunk in chunks {
        hasher.update(chunk.chunk_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(chunk.text.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Reads line-delimited JSON documents. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn read_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|e| CorpusError::Ingest { line: line_no, message: e.to_string() })?;
        if doc.doc_id.is_empty() {
            return Err(CorpusError::Ingest { line: line_no, message: "empty doc_id".into() });
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Ingest {
                line: line_no,
                message: format!("document {:?} has no text", doc.doc_id),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocument { doc_id: doc.doc_id, line: line_no });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Immutable, in-memory view of an ingested corpus.
#[derive(Debug, Clone, Default)]
pub struct ChunkStore {
    documents: Vec<Document>,
    chunks: Vec<Chunk>,
    doc_index: HashMap<String, usize>,
    chunk_index: HashMap<String, usize>,
    doc_chunks: HashMap<String, Vec<usize>>,
}

impl ChunkStore {
    pub fn from_documents(docs: Vec<Document>, target_words: usize) -> Result<Self, CorpusError> {
        let mut chunks = Vec::new();
        let mut seen = HashSet::new();
        for doc in &docs {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocument { doc_id: doc.doc_id.clone(), line: 0 });
            }
            chunks.extend(chunk_document(doc, target_words)?);
        }
        Ok(Self::from_parts(docs, chunks))
    }

    fn from_parts(documents: Vec<Document>, chunks: Vec<Chunk>) -> Self {
        let doc_index = documents.iter().enumerate().map(|(i, d)| (d.doc_id.clone(), i)).collect();
        let chunk_index = chunks.iter().enumerate().map(|(i, c)| (c.chunk_id.clone(), i)).collect();
        let mut doc_chunks: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, c) in chunks.iter().enumerate() {
            doc_chunks.entry(c.doc_id.clone()).or_default().push(i);
        }
        Self { documents, chunks, doc_index, chunk_index, doc_chunks }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn get_chunk(&self, chunk_id: &str) -> Result<&Chunk, CorpusError> {
        self.chunk_index
            .get(chunk_id)
            .map(|&i| &self.chunks[i])
            .ok_or_else(|| CorpusError::NotFound { kind: "chunk", id: chunk_id.to_string() })
    }

    pub fn get_document(&self, doc_id: &str) -> Result<&Document, CorpusError> {
        self.doc_index
            .get(doc_id)
            .map(|&i| &self.documents[i])
            .ok_or_else(|| CorpusError::NotFound { kind: "document", id: doc_id.to_string() })
    }

    pub fn has_document(&self, doc_id: &str) -> bool {
        self.doc_index.contains_key(doc_id)
    }

    /// Chunks of one document in position order; empty for unknown ids.
    pub fn chunks_of(&self, doc_id: &str) -> impl Iterator<Item = &Chunk> {
        self.doc_chunks.get(doc_id).into_iter().flatten().map(|&i| &self.chunks[i])
    }

    pub fn checksum(&self) -> String {
        corpus_checksum(&self.chunks)
    }

    /// Writes documents, chunks and a fresh manifest into `dir`, replacing any
    /// previous store there.
    pub fn save(&self, dir: &Path, target_words: usize) -> Result<CorpusManifest, CorpusError> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(DOCUMENTS_FILE), &self.documents)?;
        write_jsonl(&dir.join(CHUNKS_FILE), &self.chunks)?;
        let checksum = self.checksum();
        let manifest = CorpusManifest {
            corpus_id: checksum[..16].to_string(),
            num_documents: self.documents.len(),
            num_chunks: self.chunks.len(),
            chunk_target_words: target_words,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            checksum,
        };
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join(MANIFEST_FILE), body + "\n")?;
        Ok(manifest)
    }

    /// Loads a store and verifies it against its manifest.
    pub fn load(dir: &Path) -> Result<(Self, CorpusManifest), CorpusError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .map_err(|e| CorpusError::Corrupt { path: manifest_path.clone(), message: e.to_string() })?;
        let documents: Vec<Document> = read_jsonl(&dir.join(DOCUMENTS_FILE))?;
        let chunks: Vec<Chunk> = read_jsonl(&dir.join(CHUNKS_FILE))?;
        let store = Self::from_parts(documents, chunks);
        if store.documents.len() != manifest.num_documents
            || store.chunks.len() != manifest.num_chunks
            || store.checksum() != manifest.checksum
        {
            return Err(CorpusError::Corrupt {
                path: manifest_path,
                message: "store contents do not match manifest".into(),
            });
        }
        Ok((store, manifest))
    }
}

/// Reads, chunks and persists a corpus in one go.
pub fn ingest_corpus(source: &Path, index_dir: &Path, target_words: usize) -> Result<CorpusManifest, CorpusError> {
    if target_words == 0 {
        return Err(CorpusError::InvalidTarget);
    }
    let docs = read_documents(source)?;
    let store = ChunkStore::from_documents(docs, target_words)?;
    store.save(index_dir, target_words)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", idx + 1),
        })?);
    }
    Ok(out)
}
