//! Forward-pass latency on a single question graph with many sources.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{batch_graphs, build_star_graph, FeatureDims, Modality, QuestionGraph, QuestionInstance, SourceRecord};
use crate::layers::Model;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Source nodes in the graph (the question node is extra).
    pub nodes: usize,
    pub repeat: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            nodes: 50,
            repeat: 20,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub nodes: usize,
    pub repeat: usize,
    /// Source rows scored by each forward pass.
    pub sources_per_forward: usize,
    /// Model forwards run during the timed repetitions.
    pub forward_calls: u64,
    pub forwards_per_graph: f64,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

/// Star graph with `n` sources alternating image / text, Gaussian features.
pub fn random_star_graph(n: usize, dims: FeatureDims, rng: &mut Rng) -> Result<QuestionGraph> {
    if n == 0 {
        return Err(Error::Config("benchmark graph needs at least one source".into()));
    }
    let mut store = std::collections::HashMap::new();
    store.insert("q".to_string(), rng.normal_vec(dims.text));
    let sources = (0..n)
        .map(|i| {
            let modality = if i % 2 == 0 { Modality::Image } else { Modality::Text };
            let feature_ids = match modality {
                Modality::Image => {
                    store.insert(format!("i{i}"), rng.normal_vec(dims.image));
                    store.insert(format!("c{i}"), rng.normal_vec(dims.text));
                    vec![format!("i{i}"), format!("c{i}")]
                }
                Modality::Text => {
                    store.insert(format!("t{i}"), rng.normal_vec(dims.text));
                    vec![format!("t{i}")]
                }
            };
            SourceRecord {
                source_id: format!("s{i}"),
                modality,
                label: 0,
                feature_ids,
                raw_text: None,
            }
        })
        .collect();
    let inst = QuestionInstance {
        question_id: "bench".into(),
        category: "text".into(),
        question_feature_id: "q".into(),
        question_text: None,
        sources,
    };
    build_star_graph(&inst, &store, dims)
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `config.repeat` inference passes of `model` over one graph.
pub fn bench_forward(model: &Model, graph: &QuestionGraph, config: &BenchConfig) -> Result<BenchReport> {
    if config.repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    let batch = batch_graphs([graph])?;
    for _ in 0..config.warmup {
        model.infer(&batch)?;
    }
    let calls_before = model.forward_calls();
    let mut samples = Vec::with_capacity(config.repeat);
    let mut sources_per_forward = 0;
    for _ in 0..config.repeat {
        let t = Instant::now();
        let logits = model.infer(&batch)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        sources_per_forward = batch
            .nodes()
            .iter()
            .enumerate()
            .filter(|(i, n)| n.kind.modality().is_some() && logits.row(*i).iter().all(|v| v.is_finite()))
            .count();
    }
    let forward_calls = model.forward_calls() - calls_before;
    let mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    samples.sort_by(f64::total_cmp);
    Ok(BenchReport {
        nodes: graph.source_count(),
        repeat: config.repeat,
        sources_per_forward,
        forward_calls,
        forwards_per_graph: forward_calls as f64 / config.repeat as f64,
        min_ms: samples[0],
        median_ms: percentile(&samples, 50.0),
        p95_ms: percentile(&samples, 95.0),
        mean_ms,
    })
}
