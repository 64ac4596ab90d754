//! Graph convolutions.
//!
//! Mean aggregation (SAGE):
//!
//! ```text
//! x'_i = W1 x_i + b1 + mean_{j ∈ N(i)} (W2 x_j + b2)
//! ```
//!
//! Residual edge gating:
//!
//! ```text
//! η_ij = σ(W3 x_i + W4 x_j + b_g)
//! x'_i = W1 x_i + b1 + Σ_{j ∈ N(i)} η_ij ⊙ (W2 x_j + b2)
//! ```
//!
//! `η_ij` is a vector over output channels and is computed per directed
//! edge, so `η_ij ≠ η_ji` in general. An empty neighborhood contributes
//! nothing. In a heterogeneous layer `W1..W4` (and the per-map biases) are
//! chosen by the kind of the node they are applied to; each neighbor is
//! projected with its own kind's weights before aggregation.
//!
//! The mean is linear, so a SAGE layer may instead average a group's raw
//! features per receiving node and project the averages. Receivers with the
//! same neighbors share one average, so this pays off whenever a group has
//! fewer distinct neighborhoods than members. In a star graph the sources
//! all send only to the question node and all hear only from it, which
//! leaves one or two rows per graph through `W2`.

use std::collections::HashMap;

use super::Parameter;
use crate::error::{Error, Result};
use crate::graph::{BatchedGraph, KindBlock, NodeKind};
use crate::tensor::{sigmoid, Matrix};

/// Weights applied to nodes of one group (one kind, or all nodes).
#[derive(Clone, Debug)]
pub(crate) struct Projections {
    pub(crate) self_w: Parameter,
    pub(crate) self_b: Option<Parameter>,
    pub(crate) msg_w: Parameter,
    pub(crate) msg_b: Option<Parameter>,
    pub(crate) gate_dst_w: Option<Parameter>,
    pub(crate) gate_src_w: Option<Parameter>,
}

impl Projections {
    fn in_dim(&self) -> usize {
        self.self_w.value.rows()
    }

    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.self_w];
        out.extend(&self.self_b);
        out.push(&self.msg_w);
        out.extend(&self.msg_b);
        out.extend(&self.gate_dst_w);
        out.extend(&self.gate_src_w);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.self_w];
        out.extend(&mut self.self_b);
        out.push(&mut self.msg_w);
        out.extend(&mut self.msg_b);
        out.extend(&mut self.gate_dst_w);
        out.extend(&mut self.gate_src_w);
        out
    }
}

#[derive(Clone, Debug)]
pub struct GraphConv {
    name: String,
    gated: bool,
    /// `Some` for a heterogeneous layer: group `g` serves `kinds[g]`.
    pub(crate) kinds: Option<Vec<NodeKind>>,
    pub(crate) groups: Vec<Projections>,
    gate_b: Option<Parameter>,
    out_dim: usize,
}

/// Node features entering a graph layer, one matrix per group.
#[derive(Clone, Debug)]
pub struct ConvInput {
    blocks: Vec<InputBlock>,
}

#[derive(Clone, Debug)]
struct InputBlock {
    group: usize,
    /// Batch-node indices of the rows; `None` means rows are nodes `0..n`.
    nodes: Option<Vec<usize>>,
    x: Matrix,
}

impl ConvInput {
    /// A single matrix whose row `i` belongs to batch node `i`.
    pub fn shared(x: Matrix) -> Self {
        ConvInput {
            blocks: vec![InputBlock {
                group: 0,
                nodes: None,
                x,
            }],
        }
    }
}

/// A group whose messages were averaged before projection. Receivers with
/// the same in-group neighbors and degree share a row: row `r` of `mean` is
/// the sum of block rows `senders[r]` times `inv[r]` (one over the degree).
#[derive(Clone, Debug)]
struct Pooled {
    /// (receiving node, pooled row)
    receivers: Vec<(usize, usize)>,
    mean: Matrix,
    senders: Vec<Vec<usize>>,
    inv: Vec<f64>,
}

impl Pooled {
    /// Weight of the message bias in row `r`: the group's share of the
    /// receiver's neighbors.
    fn share(&self, r: usize) -> f64 {
        self.senders[r].len() as f64 * self.inv[r]
    }
}

/// What a graph layer keeps for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    input: ConvInput,
    /// Per input block, `Some` when its messages were pooled first.
    pooled: Vec<Option<Pooled>>,
    /// Messages `W2 x_j + b2` (gated layers only).
    messages: Option<Matrix>,
    /// Gate values, one row per directed edge in (receiver, sender-ascending) order.
    gates: Option<Matrix>,
    nodes: usize,
}

impl ConvCache {
    /// Gate values per directed edge, in receiver order then ascending
    /// sender; `None` for mean-aggregation layers.
    pub fn gates(&self) -> Option<&Matrix> {
        self.gates.as_ref()
    }
}

impl GraphConv {
    /// Builds a layer. `in_dims` holds one width per group: either a single
    /// shared width, or one per entry of `kinds`.
    pub(crate) fn build(
        name: &str,
        gated: bool,
        bias: bool,
        kinds: Option<Vec<NodeKind>>,
        in_dims: &[usize],
        out_dim: usize,
        init: &mut dyn FnMut(usize, usize) -> Matrix,
    ) -> Self {
        let group_names: Vec<String> = match &kinds {
            Some(k) => k.iter().map(|k| format!("{name}.{}", k.name())).collect(),
            None => vec![name.to_string()],
        };
        let groups = group_names
            .iter()
            .zip(in_dims)
            .map(|(g, &d)| {
                let bias_param = |tag: &str| bias.then(|| Parameter::new(format!("{g}.{tag}.bias"), Matrix::zeros(1, out_dim)));
                Projections {
                    self_w: Parameter::new(format!("{g}.self.weight"), init(d, out_dim)),
                    self_b: bias_param("self"),
                    msg_w: Parameter::new(format!("{g}.msg.weight"), init(d, out_dim)),
                    msg_b: bias_param("msg"),
                    gate_dst_w: gated.then(|| Parameter::new(format!("{g}.gate_dst.weight"), init(d, out_dim))),
                    gate_src_w: gated.then(|| Parameter::new(format!("{g}.gate_src.weight"), init(d, out_dim))),
                }
            })
            .collect();
        GraphConv {
            name: name.to_string(),
            gated,
            kinds,
            groups,
            gate_b: (gated && bias).then(|| Parameter::new(format!("{name}.gate.bias"), Matrix::zeros(1, out_dim))),
            out_dim,
        }
    }

    /// A shared (non-heterogeneous) layer with explicit weights, mostly for
    /// tests. Weights are `in × out`, biases `1 × out`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_weights(
        gated: bool,
        self_w: Matrix,
        msg_w: Matrix,
        gate_weights: Option<(Matrix, Matrix)>,
        biases: Option<(Matrix, Matrix)>,
        gate_bias: Option<Matrix>,
    ) -> Result<Self> {
        let out_dim = self_w.cols();
        let (gate_dst_w, gate_src_w) = match gate_weights {
            Some((d, s)) => (Some(Parameter::new("conv.gate_dst.weight", d)), Some(Parameter::new("conv.gate_src.weight", s))),
            None => (None, None),
        };
        if gated != gate_dst_w.is_some() {
            return Err(Error::Config("gate weights must be given exactly for gated layers".into()));
        }
        let (self_b, msg_b) = match biases {
            Some((a, b)) => (Some(Parameter::new("conv.self.bias", a)), Some(Parameter::new("conv.msg.bias", b))),
            None => (None, None),
        };
        let layer = GraphConv {
            name: "conv".into(),
            gated,
            kinds: None,
            groups: vec![Projections {
                self_w: Parameter::new("conv.self.weight", self_w),
                self_b,
                msg_w: Parameter::new("conv.msg.weight", msg_w),
                msg_b,
                gate_dst_w,
                gate_src_w,
            }],
            gate_b: gate_bias.map(|b| Parameter::new("conv.gate.bias", b)),
            out_dim,
        };
        layer.check_shapes()?;
        Ok(layer)
    }

    fn check_shapes(&self) -> Result<()> {
        for g in &self.groups {
            let d = g.in_dim();
            for p in g.params() {
                let want = if p.name.ends_with(".bias") { (1, self.out_dim) } else { (d, self.out_dim) };
                if p.value.shape() != want {
                    return Err(Error::shape(format!("{} parameter {}", self.name, p.name), want, p.value.shape()));
                }
            }
        }
        if let Some(b) = &self.gate_b {
            if b.value.shape() != (1, self.out_dim) {
                return Err(Error::shape(format!("{} gate bias", self.name), (1, self.out_dim), b.value.shape()));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_gated(&self) -> bool {
        self.gated
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.groups.iter().flat_map(|g| g.params()).collect();
        out.extend(&self.gate_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.groups.iter_mut().flat_map(|g| g.params_mut()).collect();
        out.extend(&mut self.gate_b);
        out
    }

    /// Routes the batch's per-kind input blocks to this layer's groups.
    pub fn input_from_batch(&self, batch: &BatchedGraph) -> Result<ConvInput> {
        input_from_blocks(self, batch.blocks())
    }

    /// Runs the layer. Returns the `nodes × out_dim` output and, when
    /// `keep_cache`, the state needed by [`GraphConv::backward`].
    pub fn forward(&self, batch: &BatchedGraph, input: ConvInput, keep_cache: bool) -> Result<(Matrix, Option<ConvCache>)> {
        let n = batch.node_count();
        let out = self.out_dim;
        let mut self_term = Matrix::zeros(n, out);
        let mut messages = Matrix::zeros(n, out);
        let (mut gate_dst, mut gate_src) = if self.gated {
            (Matrix::zeros(n, out), Matrix::zeros(n, out))
        } else {
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0))
        };
        let owner = block_owner(&input, n)?;
        let mut pooled: Vec<Option<Pooled>> = vec![None; input.blocks.len()];

        for (bi, block) in input.blocks.iter().enumerate() {
            let g = &self.groups[block.group];
            if block.x.cols() != g.in_dim() {
                return Err(Error::shape(
                    format!("{} input for {}", self.name, self.group_label(block.group)),
                    (block.x.rows(), g.in_dim()),
                    block.x.shape(),
                ));
            }
            let place = |dst: &mut Matrix, mut m: Matrix, b: &Option<Parameter>| -> Result<()> {
                if let Some(b) = b {
                    m.add_row_broadcast(&b.value)?;
                }
                match &block.nodes {
                    Some(idx) => dst.scatter_rows(idx, &m),
                    None if m.rows() == n => {
                        *dst = m;
                        Ok(())
                    }
                    None => Err(Error::shape("graph layer input", (n, m.cols()), m.shape())),
                }
            };
            place(&mut self_term, block.x.matmul(&g.self_w.value)?, &g.self_b)?;
            if !self.gated {
                if let Some(p) = pool_block(batch, &owner, bi, &block.x) {
                    pooled[bi] = Some(p);
                    continue;
                }
            }
            place(&mut messages, block.x.matmul(&g.msg_w.value)?, &g.msg_b)?;
            if let (Some(wd), Some(ws)) = (&g.gate_dst_w, &g.gate_src_w) {
                place(&mut gate_dst, block.x.matmul(&wd.value)?, &None)?;
                place(&mut gate_src, block.x.matmul(&ws.value)?, &None)?;
            }
        }

        let mut output = self_term;
        let mut gates = None;
        if self.gated {
            let directed: usize = (0..n).map(|i| batch.neighbors(i).len()).sum();
            let mut eta = Matrix::zeros(directed, out);
            let zero_bias = vec![0.0; out];
            let gb = self.gate_b.as_ref().map_or(&zero_bias[..], |b| b.value.data());
            let mut e = 0;
            for i in 0..n {
                for &j in batch.neighbors(i) {
                    let (dst, src, msg) = (gate_dst.row(i), gate_src.row(j), messages.row(j));
                    let eta_row = eta.row_mut(e);
                    for c in 0..out {
                        eta_row[c] = sigmoid(dst[c] + src[c] + gb[c]);
                    }
                    let o = output.row_mut(i);
                    for c in 0..out {
                        o[c] += eta_row[c] * msg[c];
                    }
                    e += 1;
                }
            }
            gates = Some(eta);
        } else {
            let mut acc = vec![0.0; out];
            for i in 0..n {
                let nbrs = batch.neighbors(i);
                if nbrs.is_empty() {
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for &j in nbrs.iter().filter(|&&j| pooled[owner[j].0].is_none()) {
                    for (a, m) in acc.iter_mut().zip(messages.row(j)) {
                        *a += m;
                    }
                }
                let inv = 1.0 / nbrs.len() as f64;
                for (o, a) in output.row_mut(i).iter_mut().zip(&acc) {
                    *o += inv * a;
                }
            }
            for (p, block) in pooled.iter().zip(&input.blocks) {
                let Some(p) = p else { continue };
                let g = &self.groups[block.group];
                let projected = p.mean.matmul(&g.msg_w.value)?;
                for &(i, r) in &p.receivers {
                    let o = output.row_mut(i);
                    for (o, m) in o.iter_mut().zip(projected.row(r)) {
                        *o += m;
                    }
                    if let Some(b) = &g.msg_b {
                        let share = p.share(r);
                        for (o, b) in o.iter_mut().zip(b.value.data()) {
                            *o += share * b;
                        }
                    }
                }
            }
        }

        let cache = keep_cache.then(|| ConvCache {
            input,
            pooled,
            messages: self.gated.then_some(messages),
            gates,
            nodes: n,
        });
        Ok((output, cache))
    }

    /// Accumulates parameter gradients from `d_out` and, when
    /// `want_input_grad`, returns the gradient w.r.t. each input block in
    /// the same layout as the input.
    pub fn backward(
        &mut self,
        batch: &BatchedGraph,
        cache: &ConvCache,
        d_out: &Matrix,
        want_input_grad: bool,
    ) -> Result<Option<ConvInput>> {
        let n = batch.node_count();
        let out = self.out_dim;
        if cache.nodes != n || d_out.shape() != (n, out) {
            return Err(Error::Internal(format!("{}: cache does not match this batch", self.name)));
        }
        let mut d_msg = Matrix::zeros(n, out);
        let owner = block_owner(&cache.input, n)?;
        let mut d_gate_dst = None;
        let mut d_gate_src = None;

        if self.gated {
            let (Some(messages), Some(eta)) = (&cache.messages, &cache.gates) else {
                return Err(Error::Internal(format!("{}: gated cache missing gate state", self.name)));
            };
            let mut dd = Matrix::zeros(n, out);
            let mut ds = Matrix::zeros(n, out);
            let mut db = vec![0.0; out];
            let mut e = 0;
            for i in 0..n {
                let g_out = d_out.row(i);
                for &j in batch.neighbors(i) {
                    let eta_row = eta.row(e);
                    let msg = messages.row(j);
                    let mut pre = vec![0.0; out];
                    for c in 0..out {
                        pre[c] = g_out[c] * msg[c] * eta_row[c] * (1.0 - eta_row[c]);
                    }
                    let dm = d_msg.row_mut(j);
                    for c in 0..out {
                        dm[c] += eta_row[c] * g_out[c];
                    }
                    for (a, p) in dd.row_mut(i).iter_mut().zip(&pre) {
                        *a += p;
                    }
                    for (a, p) in ds.row_mut(j).iter_mut().zip(&pre) {
                        *a += p;
                    }
                    for (a, p) in db.iter_mut().zip(&pre) {
                        *a += p;
                    }
                    e += 1;
                }
            }
            if let Some(b) = &mut self.gate_b {
                b.grad.add_assign(&Matrix::row_vector(&db))?;
            }
            d_gate_dst = Some(dd);
            d_gate_src = Some(ds);
        } else {
            for i in 0..n {
                let nbrs = batch.neighbors(i);
                if nbrs.is_empty() {
                    continue;
                }
                let inv = 1.0 / nbrs.len() as f64;
                let g_out = d_out.row(i).to_vec();
                for &j in nbrs.iter().filter(|&&j| cache.pooled[owner[j].0].is_none()) {
                    for (a, g) in d_msg.row_mut(j).iter_mut().zip(&g_out) {
                        *a += inv * g;
                    }
                }
            }
        }

        let mut input_grads = Vec::new();
        for (bi, block) in cache.input.blocks.iter().enumerate() {
            let g = &mut self.groups[block.group];
            let pick = |m: &Matrix| match &block.nodes {
                Some(idx) => m.gather_rows(idx),
                None => m.clone(),
            };
            let mut dx: Option<Matrix> = None;
            let apply = |dx: &mut Option<Matrix>, w: &mut Parameter, b: Option<&mut Parameter>, d: Matrix| -> Result<()> {
                w.grad.add_assign(&block.x.t_matmul(&d)?)?;
                if let Some(b) = b {
                    b.grad.add_assign(&d.sum_rows())?;
                }
                if want_input_grad {
                    accumulate(dx, d.matmul_t(&w.value)?)?;
                }
                Ok(())
            };
            apply(&mut dx, &mut g.self_w, g.self_b.as_mut(), pick(d_out))?;
            match &cache.pooled[bi] {
                None => apply(&mut dx, &mut g.msg_w, g.msg_b.as_mut(), pick(&d_msg))?,
                Some(p) => {
                    let mut d_proj = Matrix::zeros(p.mean.rows(), out);
                    for &(i, r) in &p.receivers {
                        d_proj.row_mut(r).iter_mut().zip(d_out.row(i)).for_each(|(a, d)| *a += d);
                    }
                    g.msg_w.grad.add_assign(&p.mean.t_matmul(&d_proj)?)?;
                    if let Some(b) = g.msg_b.as_mut() {
                        let mut db = vec![0.0; out];
                        for r in 0..p.mean.rows() {
                            let share = p.share(r);
                            db.iter_mut().zip(d_proj.row(r)).for_each(|(a, d)| *a += share * d);
                        }
                        b.grad.add_assign(&Matrix::row_vector(&db))?;
                    }
                    if want_input_grad {
                        let d_mean = d_proj.matmul_t(&g.msg_w.value)?;
                        let mut contrib = Matrix::zeros(block.x.rows(), block.x.cols());
                        for (r, senders) in p.senders.iter().enumerate() {
                            for &s in senders {
                                let row = contrib.row_mut(s);
                                row.iter_mut().zip(d_mean.row(r)).for_each(|(a, d)| *a += p.inv[r] * d);
                            }
                        }
                        accumulate(&mut dx, contrib)?;
                    }
                }
            }
            if let (Some(wd), Some(dd)) = (g.gate_dst_w.as_mut(), &d_gate_dst) {
                apply(&mut dx, wd, None, pick(dd))?;
            }
            if let (Some(ws), Some(ds)) = (g.gate_src_w.as_mut(), &d_gate_src) {
                apply(&mut dx, ws, None, pick(ds))?;
            }
            if let Some(dx) = dx {
                input_grads.push(InputBlock {
                    group: block.group,
                    nodes: block.nodes.clone(),
                    x: dx,
                });
            }
        }
        Ok(want_input_grad.then_some(ConvInput { blocks: input_grads }))
    }

    fn group_label(&self, group: usize) -> String {
        match &self.kinds {
            Some(k) => format!("node kind {}", k[group].name()),
            None => "all nodes".into(),
        }
    }
}

fn accumulate(acc: &mut Option<Matrix>, contrib: Matrix) -> Result<()> {
    match acc {
        Some(a) => a.add_assign(&contrib)?,
        None => *acc = Some(contrib),
    }
    Ok(())
}

/// For every batch node, the input block holding it and its row there.
fn block_owner(input: &ConvInput, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut owner = vec![(usize::MAX, 0); n];
    for (bi, block) in input.blocks.iter().enumerate() {
        match &block.nodes {
            Some(idx) => idx.iter().enumerate().for_each(|(row, &node)| owner[node] = (bi, row)),
            None => owner.iter_mut().enumerate().for_each(|(row, o)| *o = (bi, row)),
        }
    }
    if owner.iter().any(|o| o.0 == usize::MAX) {
        return Err(Error::Internal("graph layer input does not cover every node".into()));
    }
    Ok(owner)
}

/// Neighbor means of block `bi`'s raw features, one row per distinct
/// (in-block neighbors, degree) among the nodes that receive from the block;
/// `None` when that is no cheaper than projecting every member.
fn pool_block(batch: &BatchedGraph, owner: &[(usize, usize)], bi: usize, x: &Matrix) -> Option<Pooled> {
    let members = owner.iter().filter(|o| o.0 == bi).count();
    let mut rows: HashMap<(Vec<usize>, usize), usize> = HashMap::new();
    let mut receivers = Vec::new();
    let (mut senders, mut inv) = (Vec::new(), Vec::new());
    for i in 0..owner.len() {
        let nbrs = batch.neighbors(i);
        let mut from: Vec<usize> = nbrs.iter().filter(|&&j| owner[j].0 == bi).map(|&j| owner[j].1).collect();
        if from.is_empty() {
            continue;
        }
        from.sort_unstable();
        let next = senders.len();
        let r = *rows.entry((from.clone(), nbrs.len())).or_insert_with(|| {
            senders.push(from);
            inv.push(1.0 / nbrs.len() as f64);
            next
        });
        receivers.push((i, r));
    }
    if senders.len() >= members {
        return None;
    }
    let mut mean = Matrix::zeros(senders.len(), x.cols());
    for (r, from) in senders.iter().enumerate() {
        let row = mean.row_mut(r);
        for &s in from {
            row.iter_mut().zip(x.row(s)).for_each(|(a, v)| *a += v);
        }
        row.iter_mut().for_each(|a| *a *= inv[r]);
    }
    Some(Pooled { receivers, mean, senders, inv })
}

fn input_from_blocks(layer: &GraphConv, blocks: &[KindBlock]) -> Result<ConvInput> {
    let mut out = Vec::with_capacity(blocks.len());
    for block in blocks {
        let group = match &layer.kinds {
            Some(kinds) => kinds.iter().position(|&k| k == block.kind).ok_or_else(|| {
                Error::Config(format!("{} has no weights for node kind {}", layer.name, block.kind.name()))
            })?,
            None => 0,
        };
        out.push(InputBlock {
            group,
            nodes: Some(block.nodes.clone()),
            x: block.features.clone(),
        });
    }
    Ok(ConvInput { blocks: out })
}

impl ConvInput {
    /// Per-kind view of a heterogeneous input (or its gradient).
    pub fn into_kind_blocks(self, layer: &GraphConv) -> Vec<KindBlock> {
        self.blocks
            .into_iter()
            .map(|b| KindBlock {
                kind: layer.kinds.as_ref().map_or(NodeKind::TextSource, |k| k[b.group]),
                nodes: b.nodes.unwrap_or_else(|| (0..b.x.rows()).collect()),
                features: b.x,
            })
            .collect()
    }

    /// Collapses a single shared block into its matrix.
    pub fn into_shared(self) -> Option<Matrix> {
        let mut blocks = self.blocks;
        if blocks.len() == 1 && blocks[0].nodes.is_none() {
            blocks.pop().map(|b| b.x)
        } else {
            None
        }
    }
}

pub(crate) fn heterogeneous_layer(
    name: &str,
    gated: bool,
    bias: bool,
    input_dims: &[(NodeKind, usize)],
    out_dim: usize,
    init: &mut dyn FnMut(usize, usize) -> Matrix,
) -> GraphConv {
    let kinds = input_dims.iter().map(|&(k, _)| k).collect();
    let dims: Vec<usize> = input_dims.iter().map(|&(_, d)| d).collect();
    GraphConv::build(name, gated, bias, Some(kinds), &dims, out_dim, init)
}

pub(crate) fn shared_layer(
    name: &str,
    gated: bool,
    bias: bool,
    in_dim: usize,
    out_dim: usize,
    init: &mut dyn FnMut(usize, usize) -> Matrix,
) -> GraphConv {
    GraphConv::build(name, gated, bias, None, &[in_dim], out_dim, init)
}
