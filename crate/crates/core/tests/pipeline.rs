use mmgr_core::data::{generate_synthetic, Manifest, Split, SyntheticSpec};
use mmgr_core::latency::random_star_graph;
use mmgr_core::metrics::predict;
use mmgr_core::{
    batch_graphs, evaluate, f1, fit, weighted_ce, ConfusionCounts, EvalOptions, FeatureDims, Matrix, Model, ModelSpec,
    Precision, Rng, Topology, TrainConfig,
};
use proptest::prelude::*;

fn tiny_synthetic(seed: u64, n_train: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_train,
        n_dev: 8,
        n_test: 4,
        text_dim: 12,
        image_dim: 16,
        latent_dim: 4,
        noise_scale: 0.05,
        seed,
        ..SyntheticSpec::default()
    }
}

fn tiny_spec(topology: Topology, gated: bool, dims: FeatureDims) -> ModelSpec {
    let mut spec = ModelSpec::with_feature_dims(topology, gated, dims);
    spec.graph_dims = vec![32, 16];
    spec.head_dims = vec![16, 2];
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn manifest_survives_jsonl(seed in 0u64..1000, n in 1usize..6) {
        let data = generate_synthetic(&tiny_synthetic(seed, n)).unwrap();
        let text = data.manifest.to_jsonl().unwrap();
        let back = Manifest::parse(text.as_bytes()).unwrap();
        prop_assert_eq!(back.to_jsonl().unwrap(), text);
        prop_assert_eq!(back.entries.len(), n + 12);
    }

    #[test]
    fn weighted_ce_is_nonnegative_with_zero_sum_rows(
        values in proptest::collection::vec(-20.0f64..20.0, 2..40),
        w_pos in 0.1f64..20.0,
        seed in any::<u64>(),
    ) {
        let n = values.len() / 2;
        let logits = Matrix::from_vec(n, 2, values[..2 * n].to_vec()).unwrap();
        let mut rng = Rng::new(seed);
        let labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.3) as u8).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.8)).collect();
        mask[0] = true;
        let (loss, grad) = weighted_ce(&logits, &labels, &mask, [1.0, w_pos]).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        for i in 0..n {
            let row = grad.row(i);
            prop_assert!((row[0] + row[1]).abs() < 1e-12);
            if !mask[i] {
                prop_assert_eq!(row, &[0.0, 0.0][..]);
            }
        }
    }

    #[test]
    fn f1_is_bounded_and_symmetric(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let s = f1(&ConfusionCounts { tp, fp, fn_, tn });
        prop_assert!((0.0..=1.0).contains(&s.f1));
        // swapping false positives and false negatives swaps precision and recall only
        let t = f1(&ConfusionCounts { tp, fp: fn_, fn_: fp, tn });
        prop_assert!((s.f1 - t.f1).abs() < 1e-15);
        prop_assert_eq!(s.precision, t.recall);
    }

    #[test]
    fn logits_do_not_depend_on_batch_order(seed in any::<u64>(), count in 2usize..6) {
        let dims = FeatureDims { text: 6, image: 5 };
        let mut rng = Rng::new(seed);
        let mut graphs: Vec<_> = (0..count)
            .map(|i| {
                let mut g = random_star_graph(1 + rng.below(5), dims, &mut rng).unwrap();
                g.graph_id = format!("g{i}");
                g
            })
            .collect();
        let model = Model::init(tiny_spec(Topology::Star, true, dims), &mut rng).unwrap();
        let forward = model.infer(&batch_graphs(&graphs).unwrap()).unwrap();
        let before: Vec<Vec<f64>> = (0..count)
            .map(|g| {
                let offset: usize = graphs[..g].iter().map(|x| x.node_count()).sum();
                forward.data()[2 * offset..2 * (offset + graphs[g].node_count())].to_vec()
            })
            .collect();
        graphs.reverse();
        let batch = batch_graphs(&graphs).unwrap();
        let backward = model.infer(&batch).unwrap();
        for (g, graph) in graphs.iter().enumerate() {
            let original: usize = graph.graph_id[1..].parse().unwrap();
            let rows = batch.graph_nodes(g);
            let got = &backward.data()[2 * rows.start..2 * rows.end];
            for (a, b) in got.iter().zip(&before[original]) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn predictions_follow_the_larger_logit() {
    let data = generate_synthetic(&tiny_synthetic(4, 6)).unwrap();
    let ds = data.dataset().unwrap();
    let graphs = ds.graphs(Split::Train, Topology::Star).unwrap();
    let model = Model::init(tiny_spec(Topology::Star, false, ds.dims), &mut Rng::new(2)).unwrap();
    let predictions = predict(&model, &graphs).unwrap();
    assert_eq!(predictions.len(), graphs.len());
    for (p, g) in predictions.iter().zip(&graphs) {
        assert_eq!(p.sources.len(), g.source_count());
        for s in &p.sources {
            assert_eq!(s.predicted, s.prob_positive > 0.5);
        }
        let listed: Vec<&String> = p.sources.iter().filter(|s| s.predicted).map(|s| &s.source_id).collect();
        assert_eq!(p.positives.iter().collect::<Vec<_>>(), listed);
    }
}

#[test]
fn small_model_fits_its_training_set() {
    let data = generate_synthetic(&tiny_synthetic(9, 20)).unwrap();
    let ds = data.dataset().unwrap();
    for (topology, gated, epochs) in [(Topology::Star, false, 200), (Topology::Star, true, 200), (Topology::Dense, false, 400)] {
        let train = ds.graphs(Split::Train, topology).unwrap();
        let config = TrainConfig {
            epochs,
            batch_size: 5,
            base_lr: 3e-3,
            lr_step_epochs: 100,
            stop_at_dev_f1: Some(1.0),
            // capacity check, so no bias towards positives
            class_weights: [1.0, 1.0],
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let out = fit(&train, &train, tiny_spec(topology, gated, ds.dims), &config, |_| {}).unwrap();
        let report = evaluate(&out.model, &train, EvalOptions::default()).unwrap();
        assert!(report.combined.scores.f1 == 1.0, "{topology} gated={gated}: train F1 {}", report.combined.scores.f1);
    }
}

#[test]
fn training_loss_trends_down() {
    let data = generate_synthetic(&tiny_synthetic(5, 24)).unwrap();
    let ds = data.dataset().unwrap();
    let (train, dev) = (ds.graphs(Split::Train, Topology::Star).unwrap(), ds.graphs(Split::Dev, Topology::Star).unwrap());
    for seed in 0..3 {
        let config = TrainConfig {
            epochs: 50,
            batch_size: 8,
            base_lr: 1e-3,
            seed,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let out = fit(&train, &dev, tiny_spec(Topology::Star, false, ds.dims), &config, |_| {}).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
        let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let windows: Vec<f64> = losses.windows(10).map(smooth).collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "seed {seed}: smoothed loss rose {windows:?}");
        }
    }
}
