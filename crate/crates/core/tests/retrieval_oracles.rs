mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::*;
use irag_core::corpus::{ChunkStore, Document};
use irag_core::dense::{DenseIndex, HashingProvider};
use irag_core::engine::{Action, Engine, SessionState};
use irag_core::sparse::SparseIndex;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn ten_chunk_store() -> ChunkStore {
    let texts = [
        "The Jaws of Death is a 1976 thriller film.",
        "The Hound of Death is a collection of short stories.",
        "Jaws is a 1975 film about a great white shark.",
        "Death Valley lies in Eastern California.",
        "A shark attack thriller set off the Florida coast.",
        "The release date of the film was moved twice.",
        "Sharks have several rows of teeth in their jaws.",
        "Agatha Christie wrote many detective novels.",
        "The film was released in 1976 in the United States.",
        "Miami is a city in Florida.",
    ];
    let docs = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document { doc_id: format!("d{i}"), title: String::new(), text: t.to_string() })
        .collect();
    ChunkStore::from_documents(docs, 100).unwrap()
}

#[test]
fn bm25_full_ranking_matches_oracle_on_ten_chunks() {
    let store = ten_chunk_store();
    let index = SparseIndex::build(store.chunks()).unwrap();
    let pairs = chunk_pairs(&store);
    for query in ["jaws of death", "1976 film", "shark", "florida city", "the the film"] {
        let got = index.exact_search(query, 10, None).unwrap();
        let want = oracle_bm25(&pairs, query);
        assert_eq!(got.len(), want.len(), "{query}");
        for (g, (id, s)) in got.iter().zip(&want) {
            assert_eq!(&g.chunk_id, id, "{query}");
            assert!((g.bm25_score - s).abs() < 1e-9, "{query}: {} vs {s}", g.bm25_score);
        }
    }
}

#[test]
fn bm25_score_matches_oracle_for_every_chunk() {
    let store = ten_chunk_store();
    let index = SparseIndex::build(store.chunks()).unwrap();
    let pairs = chunk_pairs(&store);
    let q = "the jaws of death shark";
    let toks = irag_core::sparse::tokenize(q);
    let oracle: std::collections::HashMap<String, f64> = oracle_bm25(&pairs, q).into_iter().collect();
    for c in store.chunks() {
        let s = index.inverted().bm25_score(&toks, &c.chunk_id).unwrap();
        let want = oracle.get(&c.chunk_id).copied().unwrap_or(0.0);
        assert!((s - want).abs() < 1e-9);
    }
}

#[test]
fn persisted_indexes_reload_into_an_engine() {
    let dir = tempfile::tempdir().unwrap();
    let store = ten_chunk_store();
    store.save(dir.path(), 100).unwrap();
    let provider = Arc::new(HashingProvider::default());
    SparseIndex::build(store.chunks()).unwrap().save(dir.path()).unwrap();
    DenseIndex::build(store.chunks(), provider.as_ref()).unwrap().save(dir.path()).unwrap();
    let loaded = Engine::open(dir.path(), provider.clone()).unwrap();
    let fresh = Engine::build(store, provider).unwrap();
    let action = Action::SemanticSearch { query: "shark film".into() };
    let a = loaded.execute_action(&SessionState::default(), &action).unwrap().1;
    let b = fresh.execute_action(&SessionState::default(), &action).unwrap().1;
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn exact_search_matches_oracle(seed in 0u64..10_000, k in 1usize..15, docs in 1usize..60) {
        let store = ChunkStore::from_documents(random_documents(seed, docs, 6), 20).unwrap();
        let index = SparseIndex::build(store.chunks()).unwrap();
        let pairs = chunk_pairs(&store);
        let mut rng = StdRng::seed_from_u64(seed ^ 0xabcd);
        for _ in 0..3 {
            let q = random_query(&mut rng);
            let got = index.exact_search(&q, k, None).unwrap();
            let want = oracle_bm25(&pairs, &q);
            prop_assert_eq!(got.len(), want.len().min(k));
            for (g, (id, s)) in got.iter().zip(&want) {
                prop_assert_eq!(&g.chunk_id, id);
                prop_assert!((g.bm25_score - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn filtered_exact_search_is_oracle_on_the_subset(seed in 0u64..10_000, keep_mod in 2usize..5) {
        let store = ChunkStore::from_documents(random_documents(seed, 30, 4), 20).unwrap();
        let index = SparseIndex::build(store.chunks()).unwrap();
        let filter: HashSet<String> = store.chunks().iter().enumerate().filter(|(i, _)| i % keep_mod == 0).map(|(_, c)| c.chunk_id.clone()).collect();
        let q = random_query(&mut StdRng::seed_from_u64(seed));
        let got = index.exact_search(&q, 1000, Some(&filter)).unwrap();
        // Collection statistics stay global; only the returned set shrinks.
        let want: Vec<(String, f64)> = oracle_bm25(&chunk_pairs(&store), &q).into_iter().filter(|(id, _)| filter.contains(id)).collect();
        prop_assert_eq!(got.len(), want.len());
        for (g, (id, s)) in got.iter().zip(&want) {
            prop_assert_eq!(&g.chunk_id, id);
            prop_assert!((g.bm25_score - s).abs() < 1e-9);
        }
    }

    #[test]
    fn semantic_search_matches_cosine_scan(seed in 0u64..10_000, k in 1usize..12) {
        let store = ChunkStore::from_documents(random_documents(seed, 40, 3), 20).unwrap();
        let provider = HashingProvider::default();
        let index = DenseIndex::build(store.chunks(), &provider).unwrap();
        let vectors: Vec<(String, Vec<f64>)> = store.chunks().iter().map(|c| (c.chunk_id.clone(), oracle_embed(&c.text, 64))).collect();
        let q = random_query(&mut StdRng::seed_from_u64(seed));
        let qv = oracle_embed(&q, 64);
        let got = index.semantic_search(&provider, &q, k, None).unwrap();
        let want = oracle_cosine(&vectors, &qv);
        prop_assert_eq!(got.len(), k.min(want.len()));
        for (g, (id, s)) in got.iter().zip(&want) {
            prop_assert!((g.cosine_score - s).abs() < 1e-9);
            // Equal scores may legitimately differ in the last bit between the
            // two computations; only require the id when the score is not tied.
            let tied = want.iter().filter(|(_, t)| (t - s).abs() < 1e-12).count() > 1;
            if !tied {
                prop_assert_eq!(&g.chunk_id, id);
            }
        }
    }
}
