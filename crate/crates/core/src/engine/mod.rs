//! The corpus interaction engine: session state, the action algebra, fusion
//! and the tool-call/tool-response protocol.

pub mod action;
pub mod fusion;
pub mod response;
pub mod session;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{ChunkStore, CorpusError};
use crate::dense::{DenseError, DenseIndex, EmbeddingProvider};
use crate::sparse::{SparseError, SparseIndex};

pub use action::{parse_tool_calls, render_tool_calls, Action, ParseFailure};
pub use fusion::{apply_fusion, FusedHit, FUSION_DEPTH};
pub use response::{
    parse_tool_response, render_tool_response, BlockOutcome, CallEcho, EntityChunk, ResponseBlock, ScoredChunk,
    Strategy, ToolResponse,
};
pub use session::SessionState;

/// Tool schema shown to the model, versioned alongside the engine.
pub const TOOL_SCHEMA: &str = include_str!("../../assets/tool_schema.json");

pub fn tool_schema() -> Value {
    serde_json::from_str(TOOL_SCHEMA).expect("bundled tool schema is valid JSON")
}

/// The `tools` array of [`TOOL_SCHEMA`], in chat-completions format.
pub fn tool_definitions() -> Value {
    tool_schema()["tools"].clone()
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Read-only indexes plus the embedding provider. Sessions live outside.
pub struct Engine {
    store: ChunkStore,
    sparse: SparseIndex,
    dense: DenseIndex,
    provider: Arc<dyn EmbeddingProvider>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("chunks", &self.store.num_chunks())
            .field("provider", &self.provider.id())
            .finish()
    }
}

enum Retrieval {
    Semantic,
    Exact,
}

impl Engine {
    pub fn new(
        store: ChunkStore,
        sparse: SparseIndex,
        dense: DenseIndex,
        provider: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, EngineError> {
        if dense.provider_id() != provider.id() {
            return Err(EngineError::InvalidParameter(format!(
                "dense index was built with {:?} but provider is {:?}",
                dense.provider_id(),
                provider.id()
            )));
        }
        Ok(Self { store, sparse, dense, provider })
    }

    /// Builds both indexes in memory.
    pub fn build(store: ChunkStore, provider: Arc<dyn EmbeddingProvider>) -> Result<Self, EngineError> {
        let sparse = SparseIndex::build(store.chunks())?;
        let dense = DenseIndex::build(store.chunks(), provider.as_ref())?;
        Self::new(store, sparse, dense, provider)
    }

    /// Loads a corpus and both indexes from one index directory.
    pub fn open(dir: &Path, provider: Arc<dyn EmbeddingProvider>) -> Result<Self, EngineError> {
        let (store, _) = ChunkStore::load(dir)?;
        let sparse = SparseIndex::load(dir, &store)?;
        let dense = DenseIndex::load(dir, &store)?;
        Self::new(store, sparse, dense, provider)
    }

    pub fn store(&self) -> &ChunkStore {
        &self.store
    }

    pub fn sparse(&self) -> &SparseIndex {
        &self.sparse
    }

    pub fn dense(&self) -> &DenseIndex {
        &self.dense
    }

    pub fn provider(&self) -> &dyn EmbeddingProvider {
        self.provider.as_ref()
    }

    /// Every chunk whose document is not excluded.
    pub fn resolve_candidates(&self, session: &SessionState) -> HashSet<String> {
        self.store
            .chunks()
            .iter()
            .filter(|c| !session.excluded.contains(&c.doc_id))
            .map(|c| c.chunk_id.clone())
            .collect()
    }

    /// `None` means "no restriction", which skips building the set.
    fn candidate_filter(&self, session: &SessionState) -> Option<HashSet<String>> {
        (!session.excluded.is_empty()).then(|| self.resolve_candidates(session))
    }

    fn doc_filter(&self, doc_id: &str) -> HashSet<String> {
        self.store.chunks_of(doc_id).map(|c| c.chunk_id.clone()).collect()
    }

    fn scored(&self, hit: FusedHit, extra: Option<Strategy>) -> ScoredChunk {
        let chunk = self.store.get_chunk(&hit.chunk_id).ok();
        let mut provenance = Vec::new();
        if hit.semantic_score.is_some() {
            provenance.push(Strategy::Semantic);
        }
        if hit.exact_score.is_some() {
            provenance.push(Strategy::Exact);
        }
        provenance.extend(extra);
        ScoredChunk {
            doc_id: chunk.map(|c| c.doc_id.clone()).unwrap_or_default(),
            text: chunk.map(|c| c.text.clone()).unwrap_or_default(),
            chunk_id: hit.chunk_id,
            semantic_score: hit.semantic_score,
            exact_score: hit.exact_score,
            fused_score: hit.fused_score,
            provenance,
        }
    }

    fn retrieve(
        &self,
        kind: &Retrieval,
        text: &str,
        session: &SessionState,
        filter: Option<&HashSet<String>>,
        n: usize,
    ) -> Result<Vec<FusedHit>, EngineError> {
        match kind {
            Retrieval::Semantic => {
                let hits = self.dense.semantic_search(self.provider.as_ref(), text, FUSION_DEPTH, filter)?;
                apply_fusion(&hits, &[], session.w_s, session.w_e, n)
            }
            Retrieval::Exact => {
                let hits = self.sparse.exact_search(text, FUSION_DEPTH, filter)?;
                apply_fusion(&[], &hits, session.w_s, session.w_e, n)
            }
        }
    }

    /// Best chunk of each included document that is not already represented
    /// in `results`, scored with the same strategy restricted to that document.
    pub fn guaranteed_chunks(
        &self,
        session: &SessionState,
        results: &[ScoredChunk],
        kind_is_semantic: bool,
        query: &str,
    ) -> Result<Vec<ScoredChunk>, EngineError> {
        let kind = if kind_is_semantic { Retrieval::Semantic } else { Retrieval::Exact };
        let present: HashSet<&str> = results.iter().map(|c| c.doc_id.as_str()).collect();
        let mut out = Vec::new();
        for doc_id in &session.included {
            if present.contains(doc_id.as_str()) || !self.store.has_document(doc_id) {
                continue;
            }
            let filter = self.doc_filter(doc_id);
            let best = self.retrieve(&kind, query, session, Some(&filter), 1)?.pop();
            let hit = match best {
                Some(hit) => hit,
                // The document shares nothing with the query; fall back to its
                // first chunk with a zero score for the strategy that ran.
                None => {
                    let Some(first) = self.store.chunks_of(doc_id).next() else { continue };
                    FusedHit {
                        chunk_id: first.chunk_id.clone(),
                        semantic_score: kind_is_semantic.then_some(0.0),
                        exact_score: (!kind_is_semantic).then_some(0.0),
                        fused_score: 0.0,
                    }
                }
            };
            out.push(self.scored(hit, Some(Strategy::Included)));
        }
        Ok(out)
    }

    fn search_block(
        &self,
        session: &SessionState,
        kind: Retrieval,
        text: &str,
    ) -> Result<Vec<ScoredChunk>, EngineError> {
        let filter = self.candidate_filter(session);
        let fused = self.retrieve(&kind, text, session, filter.as_ref(), session.scale_n)?;
        let results: Vec<ScoredChunk> = fused.into_iter().map(|h| self.scored(h, None)).collect();
        let mut out = self.guaranteed_chunks(session, &results, matches!(kind, Retrieval::Semantic), text)?;
        out.extend(results);
        Ok(out)
    }

    fn entity_block(&self, session: &SessionState, entity: &str, query: &str) -> Result<Vec<EntityChunk>, EngineError> {
        let filter = self.candidate_filter(session);
        let hits = self.sparse.entity_match(entity, query, filter.as_ref())?;
        let to_chunk = |hit: crate::sparse::EntityHit, extra: Option<Strategy>| {
            let mut chunk = self.scored(
                FusedHit {
                    chunk_id: hit.hit.chunk_id,
                    semantic_score: None,
                    exact_score: Some(hit.hit.bm25_score),
                    fused_score: hit.hit.bm25_score,
                },
                extra,
            );
            chunk.provenance = std::iter::once(Strategy::Entity).chain(extra).collect();
            EntityChunk { chunk, snippets: hit.snippets }
        };
        let results: Vec<EntityChunk> = hits.into_iter().take(session.scale_n).map(|h| to_chunk(h, None)).collect();

        // Included documents are guaranteed only through chunks that actually
        // contain the entity.
        let present: HashSet<String> = results.iter().map(|e| e.chunk.doc_id.clone()).collect();
        let mut out = Vec::new();
        for doc_id in &session.included {
            if present.contains(doc_id) {
                continue;
            }
            let filter = self.doc_filter(doc_id);
            if let Some(hit) = self.sparse.entity_match(entity, query, Some(&filter))?.into_iter().next() {
                out.push(to_chunk(hit, Some(Strategy::Included)));
            }
        }
        out.extend(results);
        Ok(out)
    }

    /// Runs one action against `session`, returning the new session and the
    /// block describing what happened.
    pub fn execute_action(
        &self,
        session: &SessionState,
        action: &Action,
    ) -> Result<(SessionState, ResponseBlock), EngineError> {
        let mut next = session.clone();
        let mut warnings = Vec::new();
        let outcome = match action {
            Action::WeightedFusion { w_s, w_e } => {
                next.set_weights(*w_s, *w_e)?;
                BlockOutcome::Ack(format!("fusion weights set to w_s={w_s}, w_e={w_e}"))
            }
            Action::AdjustScale { n } => {
                next.set_scale(*n)?;
                BlockOutcome::Ack(format!("scale set to {n}"))
            }
            Action::IncludeDocs { doc_ids } | Action::ExcludeDocs { doc_ids } => {
                let include = matches!(action, Action::IncludeDocs { .. });
                let mut applied = Vec::new();
                for id in doc_ids {
                    if !self.store.has_document(id) {
                        warnings.push(format!("unknown doc_id {id:?} ignored"));
                        continue;
                    }
                    if include {
                        next.include(id);
                    } else {
                        next.exclude(id);
                    }
                    applied.push(id.as_str());
                }
                let verb = if include { "included" } else { "excluded" };
                BlockOutcome::Ack(format!("{verb} {} document(s): {}", applied.len(), applied.join(", ")))
            }
            Action::SemanticSearch { query } => {
                BlockOutcome::Chunks(self.search_block(session, Retrieval::Semantic, query)?)
            }
            Action::ExactSearch { keywords } => {
                BlockOutcome::Chunks(self.search_block(session, Retrieval::Exact, keywords)?)
            }
            Action::EntityMatch { entity, query } => {
                BlockOutcome::Entities(self.entity_block(session, entity, query.as_deref().unwrap_or(""))?)
            }
            Action::Answer { .. } => BlockOutcome::Ack("answer received; session finished".into()),
        };
        let block = ResponseBlock { call: CallEcho::Action(action.clone()), outcome, warnings };
        Ok((next, block))
    }

    /// Executes one turn's actions: state changes first in list order, then
    /// retrievals against the resulting state (in parallel). Blocks come back
    /// in list order. A chunk returned by more than one search block is kept
    /// only where its fused score is highest (earliest block on ties).
    pub fn execute_suite(
        &self,
        session: &SessionState,
        actions: &[Action],
    ) -> Result<(SessionState, ToolResponse), EngineError> {
        let calls: Vec<Result<Action, ParseFailure>> = actions.iter().cloned().map(Ok).collect();
        check_suite(&calls)?;
        Ok(self.run_checked(session, &calls))
    }

    /// Like [`Engine::execute_suite`] but takes raw parse results and never
    /// fails: parse failures become error blocks and protocol violations
    /// become a rejected response with the session unchanged.
    pub fn execute_calls(
        &self,
        session: &SessionState,
        calls: &[Result<Action, ParseFailure>],
    ) -> (SessionState, ToolResponse) {
        match check_suite(calls) {
            Ok(()) => self.run_checked(session, calls),
            Err(e) => (session.clone(), ToolResponse::rejected(session.clone(), e.to_string())),
        }
    }

    fn run_checked(
        &self,
        session: &SessionState,
        calls: &[Result<Action, ParseFailure>],
    ) -> (SessionState, ToolResponse) {
        let mut blocks: Vec<Option<ResponseBlock>> = vec![None; calls.len()];
        let mut state = session.clone();
        for (i, call) in calls.iter().enumerate() {
            match call {
                Err(failure) => {
                    blocks[i] = Some(ResponseBlock::failed(CallEcho::Invalid(failure.clone()), failure.reason.clone()));
                }
                Ok(action) if !action.is_retrieval() => {
                    blocks[i] = Some(match self.execute_action(&state, action) {
                        Ok((next, block)) => {
                            state = next;
                            block
                        }
                        Err(e) => ResponseBlock::failed(CallEcho::Action(action.clone()), e.to_string()),
                    });
                }
                Ok(_) => {}
            }
        }

        let frozen = &state;
        let retrieved: Vec<(usize, ResponseBlock)> = calls
            .par_iter()
            .enumerate()
            .filter_map(|(i, call)| match call {
                Ok(action) if action.is_retrieval() => Some((i, action)),
                _ => None,
            })
            .map(|(i, action)| {
                let block = match self.execute_action(frozen, action) {
                    Ok((_, block)) => block,
                    Err(e) => ResponseBlock::failed(CallEcho::Action(action.clone()), e.to_string()),
                };
                (i, block)
            })
            .collect();
        for (i, block) in retrieved {
            blocks[i] = Some(block);
        }
        let mut blocks: Vec<ResponseBlock> =
            blocks.into_iter().map(|b| b.expect("every call yields a block")).collect();
        dedup_chunks(&mut blocks);
        let response = ToolResponse { blocks, session: state.clone(), error: None };
        (state, response)
    }

    /// Parses the `<tool_call>` blocks in `assistant_text` and runs them.
    pub fn handle_text(&self, session: &SessionState, assistant_text: &str) -> (SessionState, ToolResponse) {
        self.execute_calls(session, &parse_tool_calls(assistant_text))
    }
}

fn check_suite(calls: &[Result<Action, ParseFailure>]) -> Result<(), EngineError> {
    if calls.is_empty() {
        return Err(EngineError::Protocol("empty action suite".into()));
    }
    let answers = calls.iter().filter(|c| matches!(c, Ok(Action::Answer { .. }))).count();
    if answers > 0 && calls.len() > 1 {
        return Err(EngineError::Protocol("answer must be the only action in its turn".into()));
    }
    Ok(())
}

/// Across semantic/exact blocks, keep each chunk only in the block where its
/// fused score is highest. Entity blocks are left alone since their scores are
/// on a different scale and they carry snippets.
fn dedup_chunks(blocks: &mut [ResponseBlock]) {
    let mut best: HashMap<String, (usize, f64)> = HashMap::new();
    for (i, block) in blocks.iter().enumerate() {
        if let BlockOutcome::Chunks(list) = &block.outcome {
            for c in list {
                match best.get(&c.chunk_id) {
                    Some(&(_, s)) if s >= c.fused_score => {}
                    _ => {
                        best.insert(c.chunk_id.clone(), (i, c.fused_score));
                    }
                }
            }
        }
    }
    for (i, block) in blocks.iter_mut().enumerate() {
        if let BlockOutcome::Chunks(list) = &mut block.outcome {
            let mut seen = HashSet::new();
            list.retain(|c| best.get(&c.chunk_id).is_some_and(|&(bi, _)| bi == i) && seen.insert(c.chunk_id.clone()));
        }
    }
}
