//! Parameterised layers and the fixed model stack: a run of graph
//! convolutions (the first one heterogeneous, with weights per node kind)
//! followed by a per-node Linear/ReLU classifier head producing two logits.

mod checkpoint;
mod conv;
mod head;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{ConvCache, ConvInput, GraphConv};
pub use head::{HeadLayer, Linear};

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchedGraph, FeatureDims, KindBlock, NodeKind, Topology};
use crate::tensor::{backward, with_precision, Matrix, Precision, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `U(-√(1/fan_in), √(1/fan_in))` with `fan_in = rows`.
pub fn uniform_init(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    GraphConvSage,
    GraphConvGated,
    Linear,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InDim {
    Fixed(usize),
    /// Lazily sized first layer: one input width per node kind.
    PerKind(Vec<(NodeKind, usize)>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: InDim,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub topology: Topology,
    pub gated: bool,
    /// Biases on every linear map and on the gate pre-activation.
    pub bias: bool,
    /// Width of each node kind entering the first graph layer.
    pub input_dims: Vec<(NodeKind, usize)>,
    pub graph_dims: Vec<usize>,
    /// Output widths of the head's Linear layers; a ReLU sits between
    /// consecutive ones. The last entry must be 2.
    pub head_dims: Vec<usize>,
}

impl ModelSpec {
    pub const GRAPH_DIMS: [usize; 5] = [2048, 1024, 512, 256, 128];
    pub const HEAD_DIMS: [usize; 3] = [128, 64, 2];

    /// The reference architecture over the default encoder widths.
    pub fn reference(topology: Topology, gated: bool) -> Self {
        Self::with_feature_dims(topology, gated, FeatureDims::default())
    }

    /// The reference architecture for graphs built from `dims`.
    pub fn with_feature_dims(topology: Topology, gated: bool, dims: FeatureDims) -> Self {
        let input_dims = FeatureDims::kinds(topology)
            .iter()
            .map(|&k| (k, dims.node_dim(topology, k).expect("kind valid for topology")))
            .collect();
        ModelSpec {
            topology,
            gated,
            bias: true,
            input_dims,
            graph_dims: Self::GRAPH_DIMS.to_vec(),
            head_dims: Self::HEAD_DIMS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph_dims.is_empty() {
            return Err(Error::Config("model needs at least one graph layer".into()));
        }
        if self.head_dims.last() != Some(&2) {
            return Err(Error::Config("classifier head must end in 2 outputs".into()));
        }
        if self.input_dims.is_empty() {
            return Err(Error::Config("model needs at least one input node kind".into()));
        }
        let dims = self.input_dims.iter().map(|&(_, d)| d);
        if dims.chain(self.graph_dims.iter().copied()).chain(self.head_dims.iter().copied()).any(|d| d == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        for (i, &(k, _)) in self.input_dims.iter().enumerate() {
            if self.input_dims[..i].iter().any(|&(other, _)| other == k) {
                return Err(Error::Config(format!("node kind {} listed twice", k.name())));
            }
            if self.topology == Topology::Dense && k == NodeKind::Question {
                return Err(Error::Config("dense models take no question nodes".into()));
            }
        }
        Ok(())
    }

    /// The layer table this spec expands to.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let conv = if self.gated { LayerKind::GraphConvGated } else { LayerKind::GraphConvSage };
        let mut out = Vec::new();
        let mut prev = None;
        for &d in &self.graph_dims {
            let in_dim = match prev {
                None => InDim::PerKind(self.input_dims.clone()),
                Some(p) => InDim::Fixed(p),
            };
            out.push(LayerSpec { kind: conv, in_dim, out_dim: d });
            prev = Some(d);
        }
        let mut width = prev.unwrap_or(0);
        for (i, &d) in self.head_dims.iter().enumerate() {
            if i > 0 {
                out.push(LayerSpec {
                    kind: LayerKind::Relu,
                    in_dim: InDim::Fixed(width),
                    out_dim: width,
                });
            }
            out.push(LayerSpec {
                kind: LayerKind::Linear,
                in_dim: InDim::Fixed(width),
                out_dim: d,
            });
            width = d;
        }
        out
    }
}

/// Activations retained by [`Model::forward`] for [`Model::backward`].
#[derive(Debug)]
pub struct ForwardCache {
    version: u64,
    nodes: usize,
    edges: usize,
    convs: Vec<ConvCache>,
    head_inputs: Vec<Matrix>,
}

#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    convs: Vec<GraphConv>,
    head: Vec<HeadLayer>,
    version: u64,
    forward_calls: AtomicU64,
    precision: Precision,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec.clone(),
            convs: self.convs.clone(),
            head: self.head.clone(),
            version: self.version,
            forward_calls: AtomicU64::new(self.forward_calls()),
            precision: self.precision,
        }
    }
}

impl Model {
    /// Weights drawn from [`uniform_init`] in parameter declaration order;
    /// biases start at zero.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(spec, &mut |r, c| uniform_init(rng, r, c))
    }

    /// Builds the layer stack, filling every weight matrix with `init(rows, cols)`.
    pub fn build(spec: ModelSpec, init: &mut dyn FnMut(usize, usize) -> Matrix) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::with_capacity(spec.graph_dims.len());
        let mut width = 0;
        for (i, &d) in spec.graph_dims.iter().enumerate() {
            let name = format!("conv{i}");
            let layer = if i == 0 {
                conv::heterogeneous_layer(&name, spec.gated, spec.bias, &spec.input_dims, d, init)
            } else {
                conv::shared_layer(&name, spec.gated, spec.bias, width, d, init)
            };
            convs.push(layer);
            width = d;
        }
        let mut head = Vec::new();
        for (i, &d) in spec.head_dims.iter().enumerate() {
            if i > 0 {
                head.push(HeadLayer::Relu);
            }
            let weight = Parameter::new(format!("head{i}.weight"), init(width, d));
            let bias = spec.bias.then(|| Parameter::new(format!("head{i}.bias"), Matrix::zeros(1, d)));
            head.push(HeadLayer::Linear(Linear::new(weight, bias)?));
            width = d;
        }
        Ok(Model {
            spec,
            convs,
            head,
            version: 0,
            forward_calls: AtomicU64::new(0),
            precision: Precision::F64,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn topology(&self) -> Topology {
        self.spec.topology
    }

    pub fn convs(&self) -> &[GraphConv] {
        &self.convs
    }

    pub fn head(&self) -> &[HeadLayer] {
        &self.head
    }

    /// Number of forward passes (training or inference) run on this instance.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Bumped whenever parameter values change; caches from older versions
    /// are rejected by [`Model::backward`].
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Precision of the matrix products in forward and backward passes.
    /// Not stored in checkpoints; loaded models start at `F64`.
    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.convs.iter().flat_map(|c| c.params()).collect();
        for layer in &self.head {
            if let HeadLayer::Linear(l) = layer {
                out.extend(l.params());
            }
        }
        out
    }

    /// Mutable access to all parameters in declaration order. Counts as a
    /// parameter update for cache staleness.
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.version += 1;
        self.params_mut_unversioned()
    }

    fn params_mut_unversioned(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        for layer in &mut self.head {
            if let HeadLayer::Linear(l) = layer {
                out.extend(l.params_mut());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.data().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut_unversioned() {
            p.zero_grad();
        }
    }

    /// Applies the classifier head to a `nodes × 128` (last graph width) table.
    pub fn head_forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut x = x.clone();
        for layer in &self.head {
            x = match layer {
                HeadLayer::Linear(l) => l.forward(&x)?,
                HeadLayer::Relu => x.relu(),
            };
        }
        Ok(x)
    }

    fn run(&self, batch: &BatchedGraph, keep_cache: bool) -> Result<(Matrix, Option<ForwardCache>)> {
        if self.precision == Precision::F32 {
            // narrowed once per parameter update rather than once per product
            self.parameters().iter().for_each(|p| p.value.cache_single());
        }
        with_precision(self.precision, || self.run_inner(batch, keep_cache))
    }

    fn run_inner(&self, batch: &BatchedGraph, keep_cache: bool) -> Result<(Matrix, Option<ForwardCache>)> {
        if batch.topology() != self.spec.topology {
            return Err(Error::Config(format!(
                "{} model cannot run on a {} batch",
                self.spec.topology,
                batch.topology()
            )));
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut conv_caches = Vec::new();
        let mut x = Matrix::zeros(0, 0);
        for (i, conv) in self.convs.iter().enumerate() {
            let input = if i == 0 {
                conv.input_from_batch(batch)?
            } else {
                ConvInput::shared(std::mem::replace(&mut x, Matrix::zeros(0, 0)))
            };
            let (out, cache) = conv.forward(batch, input, keep_cache)?;
            conv_caches.extend(cache);
            x = out;
        }
        let mut head_inputs = Vec::new();
        for layer in &self.head {
            let next = match layer {
                HeadLayer::Linear(l) => l.forward(&x)?,
                HeadLayer::Relu => x.relu(),
            };
            if keep_cache {
                head_inputs.push(std::mem::replace(&mut x, next));
            } else {
                x = next;
            }
        }
        let cache = keep_cache.then(|| ForwardCache {
            version: self.version,
            nodes: batch.node_count(),
            edges: batch.edge_count(),
            convs: conv_caches,
            head_inputs,
        });
        Ok((x, cache))
    }

    /// Logits (`nodes × 2`) plus the activations needed for backward.
    pub fn forward(&self, batch: &BatchedGraph) -> Result<(Matrix, ForwardCache)> {
        let (logits, cache) = self.run(batch, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Logits only; safe to call concurrently on a shared model.
    pub fn infer(&self, batch: &BatchedGraph) -> Result<Matrix> {
        Ok(self.run(batch, false)?.0)
    }

    /// Accumulates gradients of all parameters for upstream `dlogits`.
    pub fn backward(&mut self, batch: &BatchedGraph, cache: &ForwardCache, dlogits: &Matrix) -> Result<()> {
        self.backward_inner(batch, cache, dlogits, false).map(|_| ())
    }

    /// Like [`Model::backward`], also returning the gradient w.r.t. the
    /// batch's input features, one block per node kind.
    pub fn backward_with_input_grad(
        &mut self,
        batch: &BatchedGraph,
        cache: &ForwardCache,
        dlogits: &Matrix,
    ) -> Result<Vec<KindBlock>> {
        Ok(self.backward_inner(batch, cache, dlogits, true)?.unwrap_or_default())
    }

    fn backward_inner(
        &mut self,
        batch: &BatchedGraph,
        cache: &ForwardCache,
        dlogits: &Matrix,
        want_input_grad: bool,
    ) -> Result<Option<Vec<KindBlock>>> {
        let precision = self.precision;
        with_precision(precision, || self.backward_scoped(batch, cache, dlogits, want_input_grad))
    }

    fn backward_scoped(
        &mut self,
        batch: &BatchedGraph,
        cache: &ForwardCache,
        dlogits: &Matrix,
        want_input_grad: bool,
    ) -> Result<Option<Vec<KindBlock>>> {
        if cache.version != self.version {
            return Err(Error::Internal("stale forward cache: parameters changed since forward".into()));
        }
        if cache.nodes != batch.node_count() || cache.edges != batch.edge_count() {
            return Err(Error::Internal("forward cache belongs to a different batch".into()));
        }
        if dlogits.shape() != (cache.nodes, 2) {
            return Err(Error::shape("dlogits", (cache.nodes, 2), dlogits.shape()));
        }
        let mut d = dlogits.clone();
        for (layer, input) in self.head.iter_mut().zip(&cache.head_inputs).rev() {
            d = match layer {
                HeadLayer::Linear(l) => l.backward(input, &d)?,
                HeadLayer::Relu => backward::relu(input, &d)?,
            };
        }
        let mut first_grad = None;
        for (i, (conv, c)) in self.convs.iter_mut().zip(&cache.convs).enumerate().rev() {
            let want = i > 0 || want_input_grad;
            let grad = conv.backward(batch, c, &d, want)?;
            if i > 0 {
                d = grad
                    .and_then(ConvInput::into_shared)
                    .ok_or_else(|| Error::Internal("missing hidden-layer gradient".into()))?;
            } else if let Some(g) = grad {
                first_grad = Some(g.into_kind_blocks(conv));
            }
        }
        Ok(first_grad)
    }
}

#[cfg(test)]
mod tests;
