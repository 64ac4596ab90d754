//! Per-question graphs and disjoint-union batching.
//!
//! Two topologies are supported. In a dense graph every source is a node
//! whose features start with the question embedding, and all sources are
//! pairwise connected. In a star graph the question is its own node and each
//! source is connected only to it, so source-to-source information needs two
//! hops.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Question,
    ImageSource,
    TextSource,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::Question, NodeKind::ImageSource, NodeKind::TextSource];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<NodeKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Question => "question",
            NodeKind::ImageSource => "image_source",
            NodeKind::TextSource => "text_source",
        }
    }

    pub fn for_modality(m: Modality) -> NodeKind {
        match m {
            Modality::Image => NodeKind::ImageSource,
            Modality::Text => NodeKind::TextSource,
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            NodeKind::Question => None,
            NodeKind::ImageSource => Some(Modality::Image),
            NodeKind::TextSource => Some(Modality::Text),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Dense,
    Star,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Dense => "dense",
            Topology::Star => "star",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Topology::Dense),
            "star" => Ok(Topology::Star),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

/// Widths of the encoder outputs the graphs are assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    /// Sentence vectors: questions, snippets, captions.
    pub text: usize,
    /// Pooled image vectors.
    pub image: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            text: 768,
            image: 2048,
        }
    }
}

impl FeatureDims {
    /// Input width of a node, which depends only on topology and kind.
    ///
    /// Dense: image = question ‖ image ‖ caption, text = question ‖ snippet.
    /// Star: question alone, image = image ‖ caption, text = snippet.
    pub fn node_dim(&self, topology: Topology, kind: NodeKind) -> Option<usize> {
        match (topology, kind) {
            (Topology::Dense, NodeKind::Question) => None,
            (Topology::Dense, NodeKind::ImageSource) => Some(self.text + self.image + self.text),
            (Topology::Dense, NodeKind::TextSource) => Some(self.text + self.text),
            (Topology::Star, NodeKind::Question) => Some(self.text),
            (Topology::Star, NodeKind::ImageSource) => Some(self.image + self.text),
            (Topology::Star, NodeKind::TextSource) => Some(self.text),
        }
    }

    pub fn kinds(topology: Topology) -> &'static [NodeKind] {
        match topology {
            Topology::Dense => &[NodeKind::ImageSource, NodeKind::TextSource],
            Topology::Star => &NodeKind::ALL,
        }
    }
}

/// Concatenation order of node features, stored in checkpoints so a model
/// is never fed features assembled in a different order.
pub const CONCAT_ORDER_TAG: &str = "dense:question+image+caption|question+snippet;star:image+caption|snippet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source_id: String,
    pub modality: Modality,
    pub label: u8,
    /// Image: `[image, caption]`; text: `[snippet]`.
    pub feature_ids: Vec<String>,
    pub raw_text: Option<String>,
}

impl SourceRecord {
    pub fn validate(&self) -> Result<()> {
        let expected = match self.modality {
            Modality::Image => 2,
            Modality::Text => 1,
        };
        if self.feature_ids.len() != expected {
            return Err(Error::Graph(format!(
                "source `{}`: {} source needs {expected} feature ids, got {}",
                self.source_id,
                self.modality.as_str(),
                self.feature_ids.len()
            )));
        }
        if self.label > 1 {
            return Err(Error::Graph(format!(
                "source `{}`: label must be 0 or 1, got {}",
                self.source_id, self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub question_id: String,
    pub category: String,
    pub question_feature_id: String,
    pub question_text: Option<String>,
    pub sources: Vec<SourceRecord>,
}

impl QuestionInstance {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Graph(format!("question `{}` has no sources", self.question_id)));
        }
        let mut seen = HashSet::new();
        for s in &self.sources {
            if !seen.insert(s.source_id.as_str()) {
                return Err(Error::Graph(format!(
                    "question `{}`: duplicate source id `{}`",
                    self.question_id, s.source_id
                )));
            }
            s.validate()?;
        }
        Ok(())
    }
}

/// Resolves feature ids to vectors.
pub trait FeatureLookup {
    fn lookup(&self, id: &str) -> Result<Vec<f64>>;
}

impl FeatureLookup for HashMap<String, Vec<f64>> {
    fn lookup(&self, id: &str) -> Result<Vec<f64>> {
        self.get(id).cloned().ok_or_else(|| Error::Lookup(id.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub features: Vec<f64>,
    pub has_label: bool,
    pub label: u8,
    pub source_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionGraph {
    pub graph_id: String,
    pub category: String,
    pub topology: Topology,
    pub nodes: Vec<Node>,
    /// Undirected edges, each stored once as `(lo, hi)` with `lo < hi`.
    pub edges: Vec<(usize, usize)>,
}

impl QuestionGraph {
    /// Validates edges (in range, no self-loops, no duplicates) and node
    /// kinds (question nodes only in star graphs, at most one, unlabeled).
    /// Edges are normalised to `(lo, hi)` and sorted.
    pub fn new(
        graph_id: impl Into<String>,
        category: impl Into<String>,
        topology: Topology,
        nodes: Vec<Node>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let graph_id = graph_id.into();
        let n = nodes.len();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("{graph_id}: edge ({a}, {b}) out of range for {n} nodes")));
            }
            if a == b {
                return Err(Error::Graph(format!("{graph_id}: self-loop on node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(Error::Graph(format!("{graph_id}: duplicate edge ({a}, {b})")));
            }
        }
        let questions = nodes.iter().filter(|n| n.kind == NodeKind::Question).count();
        match topology {
            Topology::Dense if questions > 0 => {
                return Err(Error::Graph(format!("{graph_id}: dense graphs have no question node")));
            }
            Topology::Star if questions > 1 => {
                return Err(Error::Graph(format!("{graph_id}: more than one question node")));
            }
            _ => {}
        }
        if nodes.iter().any(|n| n.kind == NodeKind::Question && n.has_label) {
            return Err(Error::Graph(format!("{graph_id}: question node must be unlabeled")));
        }
        Ok(QuestionGraph {
            graph_id,
            category: category.into(),
            topology,
            nodes,
            edges: set.into_iter().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn source_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind != NodeKind::Question).count()
    }

    pub fn question_node(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeKind::Question)
    }

    /// Sorted neighbor lists, both directions of every edge.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        adjacency(self.nodes.len(), &self.edges)
    }

    /// Checks the full structural contract of the graph's topology: a
    /// complete graph over labeled sources (dense), or a single unlabeled
    /// question hub joined to every source and nothing else (star).
    pub fn verify_topology(&self) -> Result<()> {
        let n = self.source_count();
        let fail = |msg: String| Err(Error::Graph(format!("{}: {msg}", self.graph_id)));
        match self.topology {
            Topology::Dense => {
                if self.nodes.len() != n || self.edges.len() != n * n.saturating_sub(1) / 2 {
                    return fail(format!("dense graph with {n} sources has {} edges", self.edges.len()));
                }
                if self.nodes.iter().any(|node| !node.has_label) {
                    return fail("unlabeled source node".into());
                }
            }
            Topology::Star => {
                let Some(q) = self.question_node() else {
                    return fail("star graph without question node".into());
                };
                if self.nodes.len() != n + 1 || self.edges.len() != n {
                    return fail(format!("star graph with {n} sources has {} edges", self.edges.len()));
                }
                if self.edges.iter().any(|&(a, b)| a != q && b != q) {
                    return fail("edge not incident to the question node".into());
                }
            }
        }
        Ok(())
    }
}

fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

fn fetch(store: &dyn FeatureLookup, id: &str, expected: usize) -> Result<Vec<f64>> {
    let v = store.lookup(id)?;
    if v.len() != expected {
        return Err(Error::Dimension {
            id: id.to_string(),
            expected,
            found: v.len(),
        });
    }
    Ok(v)
}

/// The source's own features: image ‖ caption, or the snippet.
fn source_features(src: &SourceRecord, store: &dyn FeatureLookup, dims: FeatureDims) -> Result<Vec<f64>> {
    src.validate()?;
    match src.modality {
        Modality::Image => {
            let mut v = fetch(store, &src.feature_ids[0], dims.image)?;
            v.extend(fetch(store, &src.feature_ids[1], dims.text)?);
            Ok(v)
        }
        Modality::Text => fetch(store, &src.feature_ids[0], dims.text),
    }
}

fn source_node(src: &SourceRecord, features: Vec<f64>) -> Node {
    Node {
        kind: NodeKind::for_modality(src.modality),
        features,
        has_label: true,
        label: src.label,
        source_id: Some(src.source_id.clone()),
    }
}

/// Complete graph over the sources; each node is prefixed with the
/// question embedding.
pub fn build_dense_graph(
    inst: &QuestionInstance,
    store: &dyn FeatureLookup,
    dims: FeatureDims,
) -> Result<QuestionGraph> {
    inst.validate()?;
    let question = fetch(store, &inst.question_feature_id, dims.text)?;
    let mut nodes = Vec::with_capacity(inst.sources.len());
    for src in &inst.sources {
        let mut features = question.clone();
        features.extend(source_features(src, store, dims)?);
        nodes.push(source_node(src, features));
    }
    let n = nodes.len();
    let edges = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    QuestionGraph::new(&inst.question_id, &inst.category, Topology::Dense, nodes, edges)
}

/// Question node at index 0, sources follow in manifest order, one edge from
/// the question to each source.
pub fn build_star_graph(
    inst: &QuestionInstance,
    store: &dyn FeatureLookup,
    dims: FeatureDims,
) -> Result<QuestionGraph> {
    inst.validate()?;
    let question = fetch(store, &inst.question_feature_id, dims.text)?;
    let mut nodes = Vec::with_capacity(inst.sources.len() + 1);
    nodes.push(Node {
        kind: NodeKind::Question,
        features: question,
        has_label: false,
        label: 0,
        source_id: None,
    });
    for src in &inst.sources {
        nodes.push(source_node(src, source_features(src, store, dims)?));
    }
    let edges = (1..nodes.len()).map(|s| (0, s)).collect();
    QuestionGraph::new(&inst.question_id, &inst.category, Topology::Star, nodes, edges)
}

pub fn build_graph(
    topology: Topology,
    inst: &QuestionInstance,
    store: &dyn FeatureLookup,
    dims: FeatureDims,
) -> Result<QuestionGraph> {
    match topology {
        Topology::Dense => build_dense_graph(inst, store, dims),
        Topology::Star => build_star_graph(inst, store, dims),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchedNode {
    pub kind: NodeKind,
    pub has_label: bool,
    pub label: u8,
    /// Index of the member graph.
    pub graph: usize,
    /// Index within the member graph.
    pub local: usize,
    pub source_id: Option<String>,
}

/// Input features of all nodes of one kind, rows in batch-node order.
#[derive(Clone, Debug, PartialEq)]
pub struct KindBlock {
    pub kind: NodeKind,
    pub nodes: Vec<usize>,
    pub features: Matrix,
}

/// Disjoint union of question graphs sharing one topology.
#[derive(Clone, Debug)]
pub struct BatchedGraph {
    topology: Topology,
    graph_ids: Vec<String>,
    categories: Vec<String>,
    offsets: Vec<usize>,
    nodes: Vec<BatchedNode>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    blocks: Vec<KindBlock>,
}

pub fn batch_graphs<'a>(graphs: impl IntoIterator<Item = &'a QuestionGraph>) -> Result<BatchedGraph> {
    let graphs: Vec<&QuestionGraph> = graphs.into_iter().collect();
    let Some(first) = graphs.first() else {
        return Err(Error::Config("cannot batch zero graphs".into()));
    };
    let topology = first.topology;
    let mut offsets = vec![0];
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut rows: [Vec<&[f64]>; 3] = Default::default();
    let mut members: [Vec<usize>; 3] = Default::default();
    for (g, graph) in graphs.iter().enumerate() {
        if graph.topology != topology {
            return Err(Error::Config(format!(
                "cannot batch {} graph `{}` with {} graphs",
                graph.topology, graph.graph_id, topology
            )));
        }
        let base = nodes.len();
        for (local, node) in graph.nodes.iter().enumerate() {
            let k = node.kind.index();
            if let Some(prev) = rows[k].first() {
                if prev.len() != node.features.len() {
                    return Err(Error::Graph(format!(
                        "{} node {local} of `{}` has width {}, other {} nodes have {}",
                        node.kind.name(),
                        graph.graph_id,
                        node.features.len(),
                        node.kind.name(),
                        prev.len()
                    )));
                }
            }
            rows[k].push(&node.features);
            members[k].push(base + local);
            nodes.push(BatchedNode {
                kind: node.kind,
                has_label: node.has_label,
                label: node.label,
                graph: g,
                local,
                source_id: node.source_id.clone(),
            });
        }
        edges.extend(graph.edges.iter().map(|&(a, b)| (a + base, b + base)));
        offsets.push(nodes.len());
    }
    let mut blocks = Vec::new();
    for kind in NodeKind::ALL {
        let k = kind.index();
        if members[k].is_empty() {
            continue;
        }
        blocks.push(KindBlock {
            kind,
            nodes: std::mem::take(&mut members[k]),
            features: Matrix::from_rows(&rows[k])?,
        });
    }
    let neighbors = adjacency(nodes.len(), &edges);
    Ok(BatchedGraph {
        topology,
        graph_ids: graphs.iter().map(|g| g.graph_id.clone()).collect(),
        categories: graphs.iter().map(|g| g.category.clone()).collect(),
        offsets,
        nodes,
        edges,
        neighbors,
        blocks,
    })
}

impl BatchedGraph {
    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn graph_count(&self) -> usize {
        self.graph_ids.len()
    }

    pub fn graph_id(&self, g: usize) -> &str {
        &self.graph_ids[g]
    }

    pub fn category(&self, g: usize) -> &str {
        &self.categories[g]
    }

    /// Batch-node index range occupied by member graph `g`.
    pub fn graph_nodes(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn nodes(&self) -> &[BatchedNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn blocks(&self) -> &[KindBlock] {
        &self.blocks
    }

    /// Batch node → (graph id, local index).
    pub fn locate(&self, node: usize) -> (&str, usize) {
        let n = &self.nodes[node];
        (&self.graph_ids[n.graph], n.local)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn label_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.has_label).collect()
    }

    /// Splits the batch back into its member graphs.
    pub fn unbatch(&self) -> Result<Vec<QuestionGraph>> {
        let mut features: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        for block in &self.blocks {
            for (row, &node) in block.nodes.iter().enumerate() {
                features[node] = block.features.row(row).to_vec();
            }
        }
        let mut per_graph_edges = vec![Vec::new(); self.graph_count()];
        for &(a, b) in &self.edges {
            let g = self.nodes[a].graph;
            let base = self.offsets[g];
            per_graph_edges[g].push((a - base, b - base));
        }
        let mut out = Vec::with_capacity(self.graph_count());
        for (g, edges) in per_graph_edges.into_iter().enumerate() {
            let nodes = self
                .graph_nodes(g)
                .map(|i| {
                    let n = &self.nodes[i];
                    Node {
                        kind: n.kind,
                        features: std::mem::take(&mut features[i]),
                        has_label: n.has_label,
                        label: n.label,
                        source_id: n.source_id.clone(),
                    }
                })
                .collect();
            out.push(QuestionGraph::new(
                &self.graph_ids[g],
                &self.categories[g],
                self.topology,
                nodes,
                edges,
            )?);
        }
        Ok(out)
    }
}
