//! Retrieval scoring: confusion counts and precision / recall / F1 over
//! source nodes, pooled globally and broken down by modality and question
//! category. Predictions are the argmax of the two logits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Modality, QuestionGraph, QuestionInstance};
use crate::layers::Model;

/// Question categories recognised in reports. Anything else is grouped
/// under [`OTHER_CATEGORY`].
pub const CATEGORIES: [&str; 7] = ["YesNo", "Number", "Color", "Choose", "Others", "Shape", "text"];
pub const OTHER_CATEGORY: &str = "other";

const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, label: bool, predicted: bool) {
        match (label, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn scores(&self) -> Scores {
        f1(self)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and their harmonic mean; every 0/0 is taken as 0.
pub fn f1(c: &ConfusionCounts) -> Scores {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores { precision, recall, f1 }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

impl Cell {
    fn from_counts(counts: ConfusionCounts) -> Self {
        Cell {
            counts,
            scores: counts.scores(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    pub accuracy: f64,
    pub combined: Cell,
    pub per_modality: BTreeMap<String, Cell>,
    pub per_category: BTreeMap<String, Cell>,
    /// Mean of per-question F1, when requested.
    pub macro_f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub macro_average: bool,
}

/// One scored source node.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceOutcome {
    pub question: usize,
    pub category: String,
    pub modality: Modality,
    pub label: bool,
    pub predicted: bool,
}

pub fn canonical_category(category: &str) -> &str {
    if CATEGORIES.contains(&category) {
        category
    } else {
        OTHER_CATEGORY
    }
}

/// Pools outcomes into a report. Fails on an empty set.
pub fn report_from_outcomes(outcomes: &[SourceOutcome], options: EvalOptions) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::Config("nothing to evaluate: split has no source nodes".into()));
    }
    let mut combined = ConfusionCounts::default();
    let mut per_modality: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut per_category: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut per_question: BTreeMap<usize, ConfusionCounts> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    for o in outcomes {
        combined.record(o.label, o.predicted);
        per_modality.entry(o.modality.as_str().to_string()).or_default().record(o.label, o.predicted);
        let cat = canonical_category(&o.category);
        if cat == OTHER_CATEGORY {
            unknown.insert(o.category.clone());
        }
        per_category.entry(cat.to_string()).or_default().record(o.label, o.predicted);
        per_question.entry(o.question).or_default().record(o.label, o.predicted);
    }
    for c in unknown {
        log::warn!("question category `{c}` is not in the taxonomy; reported under `{OTHER_CATEGORY}`");
    }
    let macro_f1 = options
        .macro_average
        .then(|| per_question.values().map(|c| c.scores().f1).sum::<f64>() / per_question.len() as f64);
    Ok(EvalReport {
        questions: per_question.len(),
        accuracy: ratio(combined.tp + combined.tn, combined.total()),
        combined: Cell::from_counts(combined),
        per_modality: per_modality.into_iter().map(|(k, c)| (k, Cell::from_counts(c))).collect(),
        per_category: per_category.into_iter().map(|(k, c)| (k, Cell::from_counts(c))).collect(),
        macro_f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePrediction {
    pub source_id: String,
    pub modality: Modality,
    pub label: u8,
    pub prob_positive: f64,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphPrediction {
    pub graph_id: String,
    pub category: String,
    pub sources: Vec<SourcePrediction>,
    /// Ids of sources predicted positive, in node order.
    pub positives: Vec<String>,
}

/// Scores every source node of every graph. Batches run in parallel; the
/// result keeps the input order.
pub fn predict(model: &Model, graphs: &[QuestionGraph]) -> Result<Vec<GraphPrediction>> {
    let chunks: Vec<Result<Vec<GraphPrediction>>> = graphs
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let batch = batch_graphs(chunk)?;
            let probs = model.infer(&batch)?.softmax_rows();
            let mut out = Vec::with_capacity(chunk.len());
            for (g, graph) in chunk.iter().enumerate() {
                let mut sources = Vec::new();
                for (local, i) in batch.graph_nodes(g).enumerate() {
                    let node = &batch.nodes()[i];
                    let Some(modality) = node.kind.modality() else { continue };
                    let p = probs.get(i, 1);
                    sources.push(SourcePrediction {
                        source_id: node.source_id.clone().unwrap_or_else(|| format!("node{local}")),
                        modality,
                        label: node.label,
                        prob_positive: p,
                        // argmax over the two logits; ties go to the negative class
                        predicted: p > probs.get(i, 0),
                    });
                }
                let positives = sources.iter().filter(|s| s.predicted).map(|s| s.source_id.clone()).collect();
                out.push(GraphPrediction {
                    graph_id: graph.graph_id.clone(),
                    category: graph.category.clone(),
                    sources,
                    positives,
                });
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(graphs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn outcomes_from_predictions(predictions: &[GraphPrediction]) -> Vec<SourceOutcome> {
    predictions
        .iter()
        .enumerate()
        .flat_map(|(q, gp)| {
            gp.sources.iter().map(move |s| SourceOutcome {
                question: q,
                category: gp.category.clone(),
                modality: s.modality,
                label: s.label == 1,
                predicted: s.predicted,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, graphs: &[QuestionGraph], options: EvalOptions) -> Result<EvalReport> {
    if graphs.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    report_from_outcomes(&outcomes_from_predictions(&predict(model, graphs)?), options)
}

/// Lowercased alphanumeric tokens, deduplicated.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Ids of the (up to) two sources sharing the most distinct tokens with the
/// question; ties keep manifest order.
pub fn lexical_overlap_baseline(inst: &QuestionInstance) -> Vec<String> {
    let question = tokenize(inst.question_text.as_deref().unwrap_or(""));
    let mut scored: Vec<(usize, &str)> = inst
        .sources
        .iter()
        .map(|s| {
            let tokens = tokenize(s.raw_text.as_deref().unwrap_or(""));
            (question.intersection(&tokens).count(), s.source_id.as_str())
        })
        .collect();
    // stable sort keeps manifest order among equal scores
    scored.sort_by_key(|s| std::cmp::Reverse(s.0));
    scored.into_iter().take(2).map(|(_, id)| id.to_string()).collect()
}

pub fn evaluate_lexical(instances: &[QuestionInstance], options: EvalOptions) -> Result<EvalReport> {
    let mut outcomes = Vec::new();
    for (q, inst) in instances.iter().enumerate() {
        let picked: BTreeSet<String> = lexical_overlap_baseline(inst).into_iter().collect();
        for s in &inst.sources {
            outcomes.push(SourceOutcome {
                question: q,
                category: inst.category.clone(),
                modality: s.modality,
                label: s.label == 1,
                predicted: picked.contains(&s.source_id),
            });
        }
    }
    report_from_outcomes(&outcomes, options)
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7} {:>7}", "cell", "precision", "recall", "f1", "tp", "fp", "fn", "tn");
        let mut row = |name: &str, c: &Cell| {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7} {:>7}",
                name, c.scores.precision, c.scores.recall, c.scores.f1, c.counts.tp, c.counts.fp, c.counts.fn_, c.counts.tn
            );
        };
        row("combined", &self.combined);
        for (k, c) in &self.per_modality {
            row(k, c);
        }
        for (k, c) in &self.per_category {
            row(&format!("cat:{k}"), c);
        }
        let _ = writeln!(out, "questions: {}  accuracy: {:.4}", self.questions, self.accuracy);
        if let Some(m) = self.macro_f1 {
            let _ = writeln!(out, "macro f1: {m:.4}");
        }
        out
    }

    pub fn modality_f1(&self, m: Modality) -> f64 {
        self.per_modality.get(m.as_str()).map_or(0.0, |c| c.scores.f1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SourceRecord;
    use crate::tensor::Rng;

    fn counts(tp: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn: 0 }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&counts(5, 0, 0)), Scores { precision: 1.0, recall: 1.0, f1: 1.0 });
        let s = f1(&counts(1, 1, 0));
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&counts(0, 0, 3)), Scores::default());
        assert_eq!(f1(&ConfusionCounts::default()), Scores::default());
    }

    fn outcome(q: usize, cat: &str, m: Modality, label: bool, predicted: bool) -> SourceOutcome {
        SourceOutcome {
            question: q,
            category: cat.into(),
            modality: m,
            label,
            predicted,
        }
    }

    #[test]
    fn all_negative_predictions_score_high_accuracy_zero_f1() {
        let outcomes: Vec<_> = (0..100).map(|i| outcome(i / 10, "YesNo", Modality::Image, i % 25 == 0, false)).collect();
        let r = report_from_outcomes(&outcomes, EvalOptions::default()).unwrap();
        assert!(r.accuracy >= 0.9);
        assert_eq!(r.combined.scores.f1, 0.0);
    }

    #[test]
    fn two_found_one_false_alarm() {
        let outcomes = vec![
            outcome(0, "Color", Modality::Image, true, true),
            outcome(0, "Color", Modality::Text, true, true),
            outcome(0, "Color", Modality::Text, false, true),
            outcome(0, "Color", Modality::Image, false, false),
        ];
        let r = report_from_outcomes(&outcomes, EvalOptions { macro_average: true }).unwrap();
        assert_eq!(r.combined.counts, ConfusionCounts { tp: 2, fp: 1, fn_: 0, tn: 1 });
        assert!((r.combined.scores.f1 - 0.8).abs() < 1e-12);
        assert!((r.macro_f1.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(r.per_modality["image"].counts.tp, 1);
        assert!(r.render_table().contains("combined"));
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(report_from_outcomes(&[], EvalOptions::default()).is_err());
    }

    #[test]
    fn unknown_category_goes_to_other() {
        let r = report_from_outcomes(&[outcome(0, "Weather", Modality::Text, true, true)], EvalOptions::default()).unwrap();
        assert!(r.per_category.contains_key(OTHER_CATEGORY));
        assert_eq!(canonical_category("Shape"), "Shape");
    }

    #[test]
    fn cells_sum_to_combined() {
        let mut rng = Rng::new(4);
        let cats = ["YesNo", "Shape", "text", "nope"];
        let outcomes: Vec<_> = (0..500)
            .map(|i| {
                let m = if rng.bernoulli(0.5) { Modality::Image } else { Modality::Text };
                outcome(i / 7, cats[rng.below(4)], m, rng.bernoulli(0.2), rng.bernoulli(0.3))
            })
            .collect();
        let r = report_from_outcomes(&outcomes, EvalOptions::default()).unwrap();
        for cells in [&r.per_modality, &r.per_category] {
            let mut sum = ConfusionCounts::default();
            cells.values().for_each(|c| sum.merge(&c.counts));
            assert_eq!(sum, r.combined.counts);
        }
        assert_eq!(r.combined.counts.total(), 500);
    }

    fn lexical_instance(question: &str, texts: &[&str]) -> QuestionInstance {
        QuestionInstance {
            question_id: "q".into(),
            category: "text".into(),
            question_feature_id: "qf".into(),
            question_text: Some(question.into()),
            sources: texts
                .iter()
                .enumerate()
                .map(|(i, t)| SourceRecord {
                    source_id: format!("s{i}"),
                    modality: Modality::Text,
                    label: 0,
                    feature_ids: vec![format!("f{i}")],
                    raw_text: Some(t.to_string()),
                })
                .collect(),
        }
    }

    #[test]
    fn lexical_top_two() {
        let inst = lexical_instance("a b c", &["A, b! c", "b b", "zzz"]);
        assert_eq!(lexical_overlap_baseline(&inst), vec!["s0", "s1"]);
        let inst = lexical_instance("a b c", &["x", "c", "y", "a b"]);
        assert_eq!(lexical_overlap_baseline(&inst), vec!["s3", "s1"]);
    }

    #[test]
    fn lexical_ties_keep_manifest_order() {
        let inst = lexical_instance("a b c", &["x", "y", "z"]);
        assert_eq!(lexical_overlap_baseline(&inst), vec!["s0", "s1"]);
    }

    #[test]
    fn tokenizer_lowercases_and_dedups() {
        let t = tokenize("What COLOR is the car's roof? color");
        assert!(t.contains("color") && t.contains("car") && t.contains("s"));
        assert_eq!(t.iter().filter(|x| *x == "color").count(), 1);
    }
}
