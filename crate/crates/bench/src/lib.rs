//! Fixtures shared by the criterion benchmarks.

use mmgr_core::latency::random_star_graph;
use mmgr_core::{FeatureDims, Model, ModelSpec, Precision, QuestionGraph, Rng, Topology};

/// Freshly initialised full-size star model.
pub fn star_model(gated: bool, precision: Precision) -> Model {
    let mut model = Model::init(ModelSpec::reference(Topology::Star, gated), &mut Rng::new(0)).expect("valid spec");
    model.set_precision(precision);
    model
}

/// Star graph with `sources` random sources at full feature widths.
pub fn star_graph(sources: usize) -> QuestionGraph {
    random_star_graph(sources, FeatureDims::default(), &mut Rng::new(1)).expect("non-empty graph")
}
