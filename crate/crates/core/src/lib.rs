//! Interactive retrieval over a chunked corpus: sparse and dense indexes, a
//! session-based interaction engine, an agent loop, a planner/reasoner
//! workflow, trajectory training utilities and QA evaluation.

pub mod agent;
pub mod corpus;
pub mod dense;
pub mod engine;
pub mod eval;
pub mod rank;
pub mod sparse;
pub mod training;
pub mod workflow;
