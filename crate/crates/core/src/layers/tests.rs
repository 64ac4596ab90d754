use super::*;
use crate::gradcheck::{max_relative_error, numeric_gradient};
use crate::graph::{batch_graphs, Node, QuestionGraph};
use crate::tensor::sigmoid;

fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn node(kind: NodeKind, features: Vec<f64>, label: u8) -> Node {
    Node {
        kind,
        has_label: kind != NodeKind::Question,
        label,
        features,
        source_id: None,
    }
}

/// A dense-topology graph of text nodes with arbitrary edges.
fn text_graph(rng: &mut Rng, n: usize, width: usize, edges: Vec<(usize, usize)>) -> QuestionGraph {
    let nodes = (0..n)
        .map(|i| node(NodeKind::TextSource, rng.normal_vec(width), (i % 2) as u8))
        .collect();
    QuestionGraph::new("g", "YesNo", Topology::Dense, nodes, edges).unwrap()
}

/// Star graph: question node 0 with `q_dim` features, then alternating
/// image/text sources.
fn star_graph(rng: &mut Rng, id: &str, sources: usize, dims: FeatureDims) -> QuestionGraph {
    let mut nodes = vec![node(NodeKind::Question, rng.normal_vec(dims.text), 0)];
    for s in 0..sources {
        let (kind, w) = if s % 2 == 0 {
            (NodeKind::ImageSource, dims.image + dims.text)
        } else {
            (NodeKind::TextSource, dims.text)
        };
        nodes.push(node(kind, rng.normal_vec(w), u8::from(s == 1)));
    }
    let edges = (1..=sources).map(|s| (0, s)).collect();
    QuestionGraph::new(id, "Color", Topology::Star, nodes, edges).unwrap()
}

fn small_spec(topology: Topology, gated: bool, dims: FeatureDims, graph_dims: &[usize]) -> ModelSpec {
    let mut spec = ModelSpec::with_feature_dims(topology, gated, dims);
    spec.graph_dims = graph_dims.to_vec();
    spec.head_dims = vec![5, 2];
    spec
}

fn node_features(g: &QuestionGraph) -> Matrix {
    Matrix::from_rows(&g.nodes.iter().map(|n| n.features.clone()).collect::<Vec<_>>()).unwrap()
}

fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum()).collect()
}

// ---- mean aggregation ----

#[test]
fn sage_identity_self_zero_neighbor_returns_input() {
    let mut rng = Rng::new(1);
    let g = text_graph(&mut rng, 4, 3, vec![(0, 1), (1, 2), (2, 3)]);
    let batch = batch_graphs([&g]).unwrap();
    let layer = GraphConv::from_weights(false, Matrix::identity(3), Matrix::zeros(3, 3), None, None, None).unwrap();
    let x = node_features(&g);
    let (out, _) = layer.forward(&batch, ConvInput::shared(x.clone()), false).unwrap();
    assert_eq!(out, x);
}

#[test]
fn sage_single_neighbor_passes_its_features() {
    let mut rng = Rng::new(2);
    let g = text_graph(&mut rng, 2, 3, vec![(0, 1)]);
    let batch = batch_graphs([&g]).unwrap();
    let layer = GraphConv::from_weights(false, Matrix::zeros(3, 3), Matrix::identity(3), None, None, None).unwrap();
    let x = node_features(&g);
    let (out, _) = layer.forward(&batch, ConvInput::shared(x.clone()), false).unwrap();
    assert_eq!(out.row(0), x.row(1));
    assert_eq!(out.row(1), x.row(0));
}

#[test]
fn sage_path_graph_matches_adjacency_loop_oracle() {
    let mut rng = Rng::new(3);
    let edges = vec![(0, 1), (1, 2), (2, 3)];
    let g = text_graph(&mut rng, 4, 3, edges.clone());
    let batch = batch_graphs([&g]).unwrap();
    let (w1, w2) = (random(&mut rng, 3, 2), random(&mut rng, 3, 2));
    let (b1, b2) = (random(&mut rng, 1, 2), random(&mut rng, 1, 2));
    let layer =
        GraphConv::from_weights(false, w1.clone(), w2.clone(), None, Some((b1.clone(), b2.clone())), None).unwrap();
    let x = node_features(&g);
    let (out, _) = layer.forward(&batch, ConvInput::shared(x.clone()), false).unwrap();

    for i in 0..4 {
        let nbrs: Vec<usize> = edges
            .iter()
            .filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None })
            .collect();
        let own = vec_mat(x.row(i), &w1);
        for c in 0..2 {
            let mut agg = 0.0;
            for &j in &nbrs {
                agg += vec_mat(x.row(j), &w2)[c] + b2.get(0, c);
            }
            let expected = own[c] + b1.get(0, c) + agg / nbrs.len() as f64;
            assert!((out.get(i, c) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn sage_output_ignores_neighbor_order() {
    // Relabel nodes so node 0's neighbors appear in a different order.
    let mut rng = Rng::new(4);
    let g = text_graph(&mut rng, 4, 3, vec![(0, 1), (0, 2), (0, 3)]);
    let perm = [0usize, 3, 1, 2];
    let mut nodes = vec![g.nodes[0].clone(); 4];
    for (old, &new) in perm.iter().enumerate() {
        nodes[new] = g.nodes[old].clone();
    }
    let h = QuestionGraph::new("h", "YesNo", Topology::Dense, nodes, vec![(0, 1), (0, 2), (0, 3)]).unwrap();
    let layer =
        GraphConv::from_weights(false, random(&mut rng, 3, 3), random(&mut rng, 3, 3), None, None, None).unwrap();
    let run = |g: &QuestionGraph| {
        let b = batch_graphs([g]).unwrap();
        layer.forward(&b, ConvInput::shared(node_features(g)), false).unwrap().0
    };
    let diff: f64 = run(&g).row(0).iter().zip(run(&h).row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12);
}

// ---- gated aggregation ----

#[test]
fn zero_inputs_give_half_gates() {
    let g = QuestionGraph::new(
        "g",
        "c",
        Topology::Dense,
        vec![node(NodeKind::TextSource, vec![0.0; 3], 0), node(NodeKind::TextSource, vec![0.0; 3], 0)],
        vec![(0, 1)],
    )
    .unwrap();
    let batch = batch_graphs([&g]).unwrap();
    let mut rng = Rng::new(5);
    let w = || random(&mut Rng::new(9), 3, 4);
    let layer = GraphConv::from_weights(
        true,
        w(),
        w(),
        Some((random(&mut rng, 3, 4), random(&mut rng, 3, 4))),
        None,
        Some(Matrix::zeros(1, 4)),
    )
    .unwrap();
    let (_, cache) = layer.forward(&batch, ConvInput::shared(node_features(&g)), true).unwrap();
    let gates = cache.unwrap().gates().unwrap().clone();
    assert_eq!(gates.shape(), (2, 4));
    assert!(gates.data().iter().all(|&v| v == 0.5));
}

#[test]
fn zero_message_weights_leave_self_term() {
    let mut rng = Rng::new(6);
    let g = text_graph(&mut rng, 3, 4, vec![(0, 1), (1, 2), (0, 2)]);
    let batch = batch_graphs([&g]).unwrap();
    let w1 = random(&mut rng, 4, 3);
    let layer = GraphConv::from_weights(
        true,
        w1.clone(),
        Matrix::zeros(4, 3),
        Some((random(&mut rng, 4, 3), random(&mut rng, 4, 3))),
        None,
        None,
    )
    .unwrap();
    let x = node_features(&g);
    let (out, _) = layer.forward(&batch, ConvInput::shared(x.clone()), false).unwrap();
    assert!(out.max_abs_diff(&x.matmul(&w1).unwrap()).unwrap() < 1e-12);
}

#[test]
fn gated_star_matches_directed_edge_oracle() {
    let mut rng = Rng::new(7);
    let nodes = (0..3).map(|i| node(if i == 0 { NodeKind::Question } else { NodeKind::TextSource }, rng.normal_vec(4), 0));
    let g = QuestionGraph::new("s", "c", Topology::Star, nodes.collect(), vec![(0, 1), (0, 2)]).unwrap();
    let batch = batch_graphs([&g]).unwrap();
    let ws: Vec<Matrix> = (0..4).map(|_| random(&mut rng, 4, 3)).collect();
    let (b1, b2, bg) = (random(&mut rng, 1, 3), random(&mut rng, 1, 3), random(&mut rng, 1, 3));
    let layer = GraphConv::from_weights(
        true,
        ws[0].clone(),
        ws[1].clone(),
        Some((ws[2].clone(), ws[3].clone())),
        Some((b1.clone(), b2.clone())),
        Some(bg.clone()),
    )
    .unwrap();
    let x = node_features(&g);
    let (out, cache) = layer.forward(&batch, ConvInput::shared(x.clone()), true).unwrap();

    // Every undirected edge unfolds into two directed ones.
    let directed = [(0usize, 1usize), (0, 2), (1, 0), (2, 0)];
    let mut expected = Matrix::zeros(3, 3);
    for i in 0..3 {
        let own = vec_mat(x.row(i), &ws[0]);
        for c in 0..3 {
            expected.set(i, c, own[c] + b1.get(0, c));
        }
    }
    for &(i, j) in &directed {
        let (a, b, m) = (vec_mat(x.row(i), &ws[2]), vec_mat(x.row(j), &ws[3]), vec_mat(x.row(j), &ws[1]));
        for c in 0..3 {
            let eta = 1.0 / (1.0 + (-(a[c] + b[c] + bg.get(0, c))).exp());
            let v = expected.get(i, c) + eta * (m[c] + b2.get(0, c));
            expected.set(i, c, v);
        }
    }
    assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);

    let gates = cache.unwrap().gates().unwrap().clone();
    assert!(gates.data().iter().all(|&v| v > 0.0 && v < 1.0));
    // η_01 (edge 0←1) and η_10 (edge 1←0) differ.
    assert!(gates.row(0) != gates.row(2));
}

#[test]
fn saturated_gates_reduce_to_plain_sum() {
    let mut rng = Rng::new(8);
    let g = text_graph(&mut rng, 4, 3, vec![(0, 1), (1, 2), (2, 3), (0, 3)]);
    let batch = batch_graphs([&g]).unwrap();
    let (w1, w2) = (random(&mut rng, 3, 2), random(&mut rng, 3, 2));
    let layer = GraphConv::from_weights(
        true,
        w1.clone(),
        w2.clone(),
        Some((Matrix::zeros(3, 2), Matrix::zeros(3, 2))),
        None,
        Some(Matrix::filled(1, 2, 40.0)),
    )
    .unwrap();
    let x = node_features(&g);
    let (out, _) = layer.forward(&batch, ConvInput::shared(x.clone()), false).unwrap();
    let own = x.matmul(&w1).unwrap();
    let msg = x.matmul(&w2).unwrap();
    let mut expected = own.clone();
    for i in 0..4 {
        for &j in batch.neighbors(i) {
            for c in 0..2 {
                expected.set(i, c, expected.get(i, c) + msg.get(j, c));
            }
        }
    }
    assert!(out.max_abs_diff(&expected).unwrap() < 1e-6);
}

// ---- head ----

#[test]
fn zero_head_gives_even_odds() {
    let spec = small_spec(Topology::Star, false, FeatureDims { text: 3, image: 4 }, &[4]);
    let model = Model::build(spec, &mut |r, c| Matrix::zeros(r, c)).unwrap();
    let logits = model.head_forward(&Matrix::filled(3, 4, 2.5)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    assert!(logits.softmax_rows().data().iter().all(|&v| v == 0.5));
}

#[test]
fn head_matches_composed_affine_oracle() {
    let mut rng = Rng::new(10);
    let mut spec = ModelSpec::reference(Topology::Star, false);
    spec.graph_dims = vec![8, 128];
    spec.input_dims = vec![(NodeKind::Question, 2), (NodeKind::TextSource, 2)];
    let mut model = Model::init(spec, &mut rng).unwrap();
    for p in model.parameters_mut() {
        if p.name.contains("bias") {
            p.value = random(&mut rng, 1, p.value.cols());
        }
    }
    let x = random(&mut rng, 5, 128);
    let logits = model.head_forward(&x).unwrap();
    let linears: Vec<&Linear> = model
        .head()
        .iter()
        .filter_map(|l| match l {
            HeadLayer::Linear(l) => Some(l),
            HeadLayer::Relu => None,
        })
        .collect();
    assert_eq!(linears.len(), 3);
    for r in 0..5 {
        let mut h = x.row(r).to_vec();
        for (i, l) in linears.iter().enumerate() {
            let b = l.bias.as_ref().unwrap().value.data();
            h = vec_mat(&h, &l.weight.value).iter().zip(b).map(|(a, b)| a + b).collect();
            if i < 2 {
                h.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.0 });
            }
        }
        for c in 0..2 {
            assert!((logits.get(r, c) - h[c]).abs() < 1e-12);
        }
    }
    let relu = Matrix::row_vector(&[-1.0, 2.0]).relu();
    assert_eq!(relu.data(), &[0.0, 2.0]);
}

// ---- whole model ----

#[test]
fn single_node_dense_graph_uses_self_terms_only() {
    let dims = FeatureDims { text: 2, image: 3 };
    let mut rng = Rng::new(11);
    let model = Model::init(small_spec(Topology::Dense, false, dims, &[4, 3]), &mut rng).unwrap();
    let g = QuestionGraph::new("one", "c", Topology::Dense, vec![node(NodeKind::TextSource, rng.normal_vec(4), 1)], vec![])
        .unwrap();
    let logits = model.infer(&batch_graphs([&g]).unwrap()).unwrap();

    let mut h = g.nodes[0].features.clone();
    for conv in model.convs() {
        let group = &conv.groups[if conv.kinds.is_some() { 1 } else { 0 }];
        let b = group.self_b.as_ref().unwrap().value.data();
        h = vec_mat(&h, &group.self_w.value).iter().zip(b).map(|(a, b)| a + b).collect();
    }
    let expected = model.head_forward(&Matrix::row_vector(&h)).unwrap();
    assert!(logits.max_abs_diff(&expected).unwrap() < 1e-12);
}

#[test]
fn batched_forward_matches_per_graph() {
    let dims = FeatureDims { text: 3, image: 4 };
    let mut rng = Rng::new(12);
    for gated in [false, true] {
        let model = Model::init(small_spec(Topology::Star, gated, dims, &[6, 5]), &mut rng).unwrap();
        let graphs: Vec<QuestionGraph> = (0..5).map(|i| star_graph(&mut rng, &format!("g{i}"), 1 + i, dims)).collect();
        let batch = batch_graphs(&graphs).unwrap();
        let all = model.infer(&batch).unwrap();
        for (gi, g) in graphs.iter().enumerate() {
            let one = model.infer(&batch_graphs([g]).unwrap()).unwrap();
            let rows: Vec<usize> = batch.graph_nodes(gi).collect();
            assert!(all.gather_rows(&rows).max_abs_diff(&one).unwrap() < 1e-6);
        }
    }
}

#[test]
fn permuting_nodes_permutes_logits() {
    let dims = FeatureDims { text: 3, image: 4 };
    let mut rng = Rng::new(13);
    let model = Model::init(small_spec(Topology::Star, true, dims, &[6, 5]), &mut rng).unwrap();
    let g = star_graph(&mut rng, "g", 4, dims);
    let perm = [3usize, 0, 4, 1, 2]; // old index -> new index
    let mut nodes = g.nodes.clone();
    for (old, &new) in perm.iter().enumerate() {
        nodes[new] = g.nodes[old].clone();
    }
    let edges = g.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let h = QuestionGraph::new("h", "c", Topology::Star, nodes, edges).unwrap();
    let lg = model.infer(&batch_graphs([&g]).unwrap()).unwrap();
    let lh = model.infer(&batch_graphs([&h]).unwrap()).unwrap();
    for (old, &new) in perm.iter().enumerate() {
        for c in 0..2 {
            assert!((lg.get(old, c) - lh.get(new, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn topology_mismatch_is_config_error() {
    let dims = FeatureDims { text: 3, image: 4 };
    let mut rng = Rng::new(14);
    let model = Model::init(small_spec(Topology::Dense, false, dims, &[4]), &mut rng).unwrap();
    let g = star_graph(&mut rng, "g", 2, dims);
    assert!(matches!(model.infer(&batch_graphs([&g]).unwrap()), Err(Error::Config(_))));
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let dims = FeatureDims { text: 3, image: 4 };
    let mut rng = Rng::new(15);
    let mut model = Model::init(small_spec(Topology::Star, true, dims, &[4, 3]), &mut rng).unwrap();
    let batch = batch_graphs([&star_graph(&mut rng, "g", 3, dims)]).unwrap();
    let (logits, cache) = model.forward(&batch).unwrap();
    model.backward(&batch, &cache, &Matrix::zeros(logits.rows(), 2)).unwrap();
    assert!(model.parameters().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn linear_backward_matches_affine_rule() {
    let mut rng = Rng::new(16);
    let x = random(&mut rng, 4, 3);
    let dy = random(&mut rng, 4, 2);
    let mut lin = Linear::new(
        Parameter::new("w", random(&mut rng, 3, 2)),
        Some(Parameter::new("b", Matrix::zeros(1, 2))),
    )
    .unwrap();
    let dx = lin.backward(&x, &dy).unwrap();
    for r in 0..3 {
        for c in 0..2 {
            let expected: f64 = (0..4).map(|n| x.get(n, r) * dy.get(n, c)).sum();
            assert!((lin.weight.grad.get(r, c) - expected).abs() < 1e-12);
        }
    }
    for c in 0..2 {
        let expected: f64 = (0..4).map(|n| dy.get(n, c)).sum();
        assert!((lin.bias.as_ref().unwrap().grad.get(0, c) - expected).abs() < 1e-12);
    }
    let expected_dx = dy.matmul(&lin.weight.value.transpose()).unwrap();
    assert!(dx.max_abs_diff(&expected_dx).unwrap() < 1e-12);
}

#[test]
fn stale_cache_rejected() {
    let dims = FeatureDims { text: 3, image: 4 };
    let mut rng = Rng::new(17);
    let mut model = Model::init(small_spec(Topology::Star, false, dims, &[4]), &mut rng).unwrap();
    let batch = batch_graphs([&star_graph(&mut rng, "g", 3, dims)]).unwrap();
    let (logits, cache) = model.forward(&batch).unwrap();
    model.parameters_mut()[0].value.data_mut()[0] += 1.0;
    let err = model.backward(&batch, &cache, &Matrix::zeros(logits.rows(), 2)).unwrap_err();
    assert!(matches!(err, Error::Internal(_)));
}

/// Checks every parameter and every input feature of `model` on `batch`
/// against central differences of `Σ logits ⊙ probe`.
fn gradient_check(model: &mut Model, batch: &BatchedGraph, rng: &mut Rng) {
    let n = batch.node_count();
    let probe = random(rng, n, 2);
    let objective = |m: &Model, b: &BatchedGraph| -> f64 {
        let l = m.infer(b).unwrap();
        l.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    model.zero_grad();
    let (_, cache) = model.forward(batch).unwrap();
    let input_grads = model.backward_with_input_grad(batch, &cache, &probe).unwrap();

    let count = model.parameters().len();
    for k in 0..count {
        let (value, analytic) = {
            let p = &model.parameters()[k];
            (p.value.clone(), p.grad.clone())
        };
        let mut probe_model = model.clone();
        let numeric = numeric_gradient(&value, |v| {
            probe_model.parameters_mut()[k].value = v.clone();
            objective(&probe_model, batch)
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "{}: relative error {err}", model.parameters()[k].name);
    }

    let graphs = batch.unbatch().unwrap();
    for block in &input_grads {
        let numeric = numeric_gradient(&block_features(batch, block.kind), |x| {
            let mut gs = graphs.clone();
            let mut row = 0;
            for g in gs.iter_mut() {
                for node in g.nodes.iter_mut().filter(|nd| nd.kind == block.kind) {
                    node.features = x.row(row).to_vec();
                    row += 1;
                }
            }
            objective(model, &batch_graphs(&gs).unwrap())
        });
        let err = max_relative_error(&block.features, &numeric);
        assert!(err < 1e-3, "input {}: relative error {err}", block.kind.name());
    }
}

fn block_features(batch: &BatchedGraph, kind: NodeKind) -> Matrix {
    batch.blocks().iter().find(|b| b.kind == kind).unwrap().features.clone()
}

#[test]
fn gradient_check_sage_layer_types() {
    let dims = FeatureDims { text: 3, image: 3 };
    let mut rng = Rng::new(18);
    // 6 → 5 → 2 with a heterogeneous first layer.
    let mut spec = small_spec(Topology::Dense, false, dims, &[5]);
    spec.input_dims = vec![(NodeKind::ImageSource, 9), (NodeKind::TextSource, 6)];
    let mut model = Model::init(spec, &mut rng).unwrap();
    let nodes = (0..5)
        .map(|i| {
            let (k, w) = if i % 2 == 0 { (NodeKind::ImageSource, 9) } else { (NodeKind::TextSource, 6) };
            node(k, rng.normal_vec(w), 0)
        })
        .collect();
    let g = QuestionGraph::new("d", "c", Topology::Dense, nodes, vec![(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)]).unwrap();
    gradient_check(&mut model, &batch_graphs([&g]).unwrap(), &mut rng);
}

#[test]
fn gradient_check_gated_layer_types() {
    let dims = FeatureDims { text: 3, image: 3 };
    let mut rng = Rng::new(19);
    let mut model = Model::init(small_spec(Topology::Star, true, dims, &[5, 4]), &mut rng).unwrap();
    let a = star_graph(&mut rng, "a", 4, dims);
    let b = star_graph(&mut rng, "b", 2, dims);
    gradient_check(&mut model, &batch_graphs([&a, &b]).unwrap(), &mut rng);
}

#[test]
fn gradient_check_two_layer_star_model() {
    let dims = FeatureDims { text: 3, image: 3 };
    let mut rng = Rng::new(20);
    let mut model = Model::init(small_spec(Topology::Star, false, dims, &[6, 5]), &mut rng).unwrap();
    let g = star_graph(&mut rng, "s", 5, dims);
    gradient_check(&mut model, &batch_graphs([&g]).unwrap(), &mut rng);
}

// ---- init ----

#[test]
fn init_is_deterministic_and_bounded() {
    let spec = ModelSpec::reference(Topology::Star, true);
    let a = Model::init(spec.clone(), &mut Rng::new(3)).unwrap();
    let b = Model::init(spec, &mut Rng::new(3)).unwrap();
    for (p, q) in a.parameters().iter().zip(b.parameters()) {
        assert!(p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let hidden = a.parameters().into_iter().find(|p| p.name == "conv1.self.weight").unwrap();
    assert_eq!(hidden.value.rows(), 2048);
    let bound = (1.0f64 / 2048.0).sqrt();
    assert!((bound - 0.0221).abs() < 1e-4);
    assert!(hidden.value.data().iter().all(|v| v.abs() <= bound));
    assert!(a.parameters().iter().filter(|p| p.name.ends_with("bias")).all(|p| p.value.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn reference_architecture_dimensions() {
    for (topology, gated) in [(Topology::Dense, false), (Topology::Star, false), (Topology::Star, true)] {
        let spec = ModelSpec::reference(topology, gated);
        let layers = spec.layers();
        let outs: Vec<usize> = layers.iter().map(|l| l.out_dim).collect();
        assert_eq!(outs, vec![2048, 1024, 512, 256, 128, 128, 128, 64, 64, 2]);
        let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind).collect();
        let conv = if gated { LayerKind::GraphConvGated } else { LayerKind::GraphConvSage };
        assert_eq!(&kinds[..5], &[conv; 5]);
        assert_eq!(&kinds[5..], &[LayerKind::Linear, LayerKind::Relu, LayerKind::Linear, LayerKind::Relu, LayerKind::Linear]);
        assert!(matches!(layers[0].in_dim, InDim::PerKind(_)));
        let model = Model::build(spec.clone(), &mut |r, c| Matrix::zeros(r, c)).unwrap();
        let first = model.parameters().into_iter().filter(|p| p.name.starts_with("conv0.") && p.name.ends_with("self.weight"));
        let widths: Vec<usize> = first.map(|p| p.value.rows()).collect();
        let expected: Vec<usize> = spec.input_dims.iter().map(|&(_, d)| d).collect();
        assert_eq!(widths, expected);
    }
    let dense = ModelSpec::reference(Topology::Dense, false);
    assert_eq!(dense.input_dims, vec![(NodeKind::ImageSource, 3584), (NodeKind::TextSource, 1536)]);
}

#[test]
fn sigmoid_is_the_gate_function() {
    assert_eq!(sigmoid(0.0), 0.5);
}

// ---- reachability ----

#[test]
fn two_graph_layers_reach_sibling_sources() {
    let dims = FeatureDims { text: 3, image: 3 };
    for (layers, reaches) in [(&[5usize, 4][..], true), (&[5usize][..], false)] {
        for gated in [false, true] {
            let mut rng = Rng::new(21);
            let model = Model::init(small_spec(Topology::Star, gated, dims, layers), &mut rng).unwrap();
            let g = star_graph(&mut rng, "s", 3, dims);
            let base = model.infer(&batch_graphs([&g]).unwrap()).unwrap();
            let mut h = g.clone();
            let dir = rng.unit_vector(h.nodes[1].features.len());
            for (f, d) in h.nodes[1].features.iter_mut().zip(dir) {
                *f += d;
            }
            let moved = model.infer(&batch_graphs([&h]).unwrap()).unwrap();
            let delta = (0..2).map(|c| (base.get(2, c) - moved.get(2, c)).abs()).fold(0.0, f64::max);
            if reaches {
                assert!(delta > 1e-8, "gated={gated}: {delta}");
            } else {
                assert_eq!(delta, 0.0, "gated={gated}");
            }
        }
    }
}
