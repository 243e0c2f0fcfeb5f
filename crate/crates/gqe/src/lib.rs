//! Query expansion for embedding-based retrieval.
//!
//! Retrieval with vector embeddings ranks a database by similarity to a
//! query vector. Query expansion replaces the query with an aggregate of
//! itself and selected database vectors before ranking. This crate provides:
//!
//! - the classic hand-crafted expansions (plain averaging, rank-decayed
//!   weights, similarity-powered weights) in [`classic`];
//! - a hierarchical, trainable expansion over a K-nearest-neighbor graph:
//!   per-level attention aggregators ([`aggregator`]) applied recursively
//!   through nested neighborhoods ([`hierarchy`]), with an efficient
//!   inference path that precomputes the query-independent levels;
//! - offline database-side augmentation with tempered softmax weights;
//! - supervised training with hard-negative mining, a contrastive loss and
//!   hand-derived analytic gradients ([`trainer`]);
//! - an evaluation harness (mean average precision, plus attribution-level
//!   agreement and diversity metrics) in [`eval`];
//! - binary stores, graph caches and model files, all little-endian and
//!   digest-checked ([`store`], [`graph`]).
//!
//! All in-memory arithmetic is f64; on-disk formats hold f32 payloads.

pub mod aggregator;
pub mod classic;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod hierarchy;
pub mod io;
pub mod math;
pub mod store;
pub mod trainer;

pub use aggregator::{aggregate, AggregationTrace, AggregatorParams};
pub use classic::{ClassicMethod, ClassicQEConfig};
pub use encoder::{EncoderConfig, EncoderVariant};
pub use error::{GqeError, Result};
pub use eval::{
    agreement, average_precision, diversity, evaluate, read_relevance_file, EvalReport,
    MethodSpec,
};
pub use graph::{build_graph, build_graph_cached, query_neighbors, KnnGraph, QueryNeighbors};
pub use hierarchy::{
    attribute_weights, build_sets, expand_fast, expand_fast_with_stats, expand_naive,
    expand_traced, precompute_levels, run_dba, GqeModel, LevelStore, NodeRef, QueryRef,
    WeightAttribution,
};
pub use store::{
    default_synth_spec, generate_queries, generate_synthetic, EmbeddingStore, SynthSpec,
};
pub use trainer::{
    contrastive_loss, mine_negatives, train, TrainConfig, TrainOutcome, TrainingTuple,
};
