//! Graph convolution models that score candidate sources (images and text
//! snippets) for a question as positives or distractors.
//!
//! The pipeline: [`data`] loads feature stores and manifests, [`graph`] turns
//! each question into a dense or star graph, [`layers`] holds the graph
//! convolutions and classifier, [`train`] fits a model and [`metrics`] scores
//! retrieval F1.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod latency;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{
    batch_graphs, build_dense_graph, build_graph, build_star_graph, BatchedGraph, FeatureDims,
    Modality, NodeKind, QuestionGraph, QuestionInstance, SourceRecord, Topology,
};
pub use layers::{Model, ModelSpec};
pub use metrics::{evaluate, f1, ConfusionCounts, EvalOptions, EvalReport, Scores};
pub use tensor::{Matrix, Precision, Rng};
pub use train::{adamw_step, fit, step_lr, weighted_ce, AdamWConfig, EpochLog, FitOutcome, TrainConfig, TrainState};
