//! Weighted-sum fusion of semantic and exact hit lists.
//!
//! Each list is cut to its top [`FUSION_DEPTH`] and min-max normalized on its
//! own; an all-equal list maps to 1.0. Chunks missing from a list take 0 for
//! that strategy.

use std::collections::BTreeMap;

use crate::dense::DenseHit;
use crate::rank::top_k;
use crate::sparse::SparseHit;

use super::EngineError;

pub const FUSION_DEPTH: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedHit {
    pub chunk_id: String,
    /// Raw cosine score, when the chunk was in the semantic top list.
    pub semantic_score: Option<f64>,
    /// Raw BM25 score, when the chunk was in the exact top list.
    pub exact_score: Option<f64>,
    pub fused_score: f64,
}

pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let (min, max) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let range = max - min;
    scores.iter().map(|&s| if range > 0.0 { (s - min) / range } else { 1.0 }).collect()
}

/// (raw sem, norm sem, raw exact, norm exact) for one chunk.
type Scores = (Option<f64>, f64, Option<f64>, f64);

pub fn apply_fusion(
    semantic_hits: &[DenseHit],
    exact_hits: &[SparseHit],
    w_s: f64,
    w_e: f64,
    n: usize,
) -> Result<Vec<FusedHit>, EngineError> {
    if !(w_s >= 0.0 && w_e >= 0.0 && w_s + w_e > 0.0) {
        return Err(EngineError::InvalidParameter(format!(
            "fusion weights ({w_s}, {w_e}) must be non-negative with a positive sum"
        )));
    }
    if n < 1 {
        return Err(EngineError::InvalidParameter("scale must be at least 1".into()));
    }

    let semantic = &semantic_hits[..semantic_hits.len().min(FUSION_DEPTH)];
    let exact = &exact_hits[..exact_hits.len().min(FUSION_DEPTH)];
    let sem_norm = min_max_normalize(&semantic.iter().map(|h| h.cosine_score).collect::<Vec<_>>());
    let exact_norm = min_max_normalize(&exact.iter().map(|h| h.bm25_score).collect::<Vec<_>>());

    let mut merged: BTreeMap<&str, Scores> = BTreeMap::new();
    for (hit, norm) in semantic.iter().zip(sem_norm) {
        let e = merged.entry(&hit.chunk_id).or_insert((None, 0.0, None, 0.0));
        e.0 = Some(hit.cosine_score);
        e.1 = norm;
    }
    for (hit, norm) in exact.iter().zip(exact_norm) {
        let e = merged.entry(&hit.chunk_id).or_insert((None, 0.0, None, 0.0));
        e.2 = Some(hit.bm25_score);
        e.3 = norm;
    }
    let fused: Vec<FusedHit> = merged
        .into_iter()
        .map(|(id, (sem, sem_n, ex, ex_n))| FusedHit {
            chunk_id: id.to_string(),
            semantic_score: sem,
            exact_score: ex,
            fused_score: w_s * sem_n + w_e * ex_n,
        })
        .collect();
    Ok(top_k(fused, n, |h| (h.chunk_id.as_str(), h.fused_score)))
}
