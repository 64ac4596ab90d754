use std::fs;
use std::io::{BufWriter, Write};

use mmgr_core::data::{generate_synthetic, load_dataset, manifest_schema, Dataset, SyntheticSpec};
use mmgr_core::latency::{bench_forward, random_star_graph, BenchConfig};
use mmgr_core::layers::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use mmgr_core::metrics::{evaluate_lexical, predict};
use mmgr_core::train::AdamWConfig;
use mmgr_core::{
    evaluate, fit, EvalOptions, FeatureDims, Model, ModelSpec, NodeKind, Precision, Rng, Topology, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::args::{BenchArgs, Cli, Command, EvalArgs, PredictArgs, Scorer, SynthArgs, TrainArgs};
use crate::Failure;

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&manifest_schema())?);
            Ok(())
        }
    }
}

/// Echoes the fully resolved configuration as one JSON line on stderr.
fn echo(command: &str, config: &impl Serialize) -> Result<(), Failure> {
    eprintln!("{}", json!({"command": command, "config": config}));
    Ok(())
}

fn open(data: &crate::args::DataArgs) -> Result<Dataset, Failure> {
    Ok(load_dataset(&data.manifest, &data.stores)?)
}

fn load_model(path: &std::path::Path, topology: Option<crate::args::TopologyArg>) -> Result<Model, Failure> {
    Ok(match topology {
        Some(t) => load_checkpoint_expecting(path, t.into())?,
        None => load_checkpoint(path)?,
    })
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let topology: Topology = a.topology.into();
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        base_lr: a.lr,
        lr_gamma: a.gamma,
        lr_step_epochs: a.lr_step,
        class_weights: [a.w_neg, a.w_pos],
        optimizer: AdamWConfig {
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        seed: a.seed,
        stop_at_dev_f1: a.stop_at_f1,
        precision: a.precision.into(),
    };
    config.validate()?;
    let dataset = open(&a.data)?;
    let spec = ModelSpec::with_feature_dims(topology, a.gated, dataset.dims);
    echo(
        "train",
        &json!({"args": &a, "train": &config, "model": {"topology": topology.as_str(), "gated": a.gated, "graph_dims": spec.graph_dims, "head_dims": spec.head_dims}}),
    )?;
    let train_graphs = dataset.graphs(mmgr_core::data::Split::Train, topology)?;
    let dev_graphs = dataset.graphs(mmgr_core::data::Split::Dev, topology)?;
    let mut log = BufWriter::new(fs::File::create(&a.log)?);
    let mut write_error = None;
    let outcome = fit(&train_graphs, &dev_graphs, spec, &config, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serialises");
        if let Err(e) = writeln!(log, "{line}").and_then(|()| log.flush()) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    save_checkpoint(&outcome.model, &a.out)?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "log": a.log,
            "epochs_run": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "best_dev_f1": outcome.best_report.combined.scores.f1,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    echo("eval", &a)?;
    let dataset = open(&a.data)?;
    let options = EvalOptions { macro_average: a.macro_f1 };
    let instances = dataset.split(a.split.into());
    let report = match a.scorer {
        Scorer::Lexical => evaluate_lexical(instances, options)?,
        Scorer::Gnn => {
            let path = a
                .model
                .as_deref()
                .ok_or_else(|| Failure::input("usage", "--model is required unless --scorer lexical"))?;
            let mut model = load_model(path, a.topology)?;
            model.set_precision(a.precision.into());
            let graphs = dataset.graphs(a.split.into(), model.topology())?;
            evaluate(&model, &graphs, options)?
        }
    };
    print!("{}", report.render_table());
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<(), Failure> {
    echo("predict", &a)?;
    let dataset = open(&a.data)?;
    let mut model = load_model(&a.model, a.topology)?;
    model.set_precision(a.precision.into());
    let topology = model.topology();
    let graphs = match (&a.qid, a.split) {
        (Some(qid), _) => {
            let inst = mmgr_core::data::Split::ALL
                .iter()
                .flat_map(|&s| dataset.split(s))
                .find(|i| &i.question_id == qid)
                .ok_or_else(|| Failure::input("lookup", format!("no question with id `{qid}` in the manifest")))?;
            vec![mmgr_core::build_graph(topology, inst, &dataset.catalog, dataset.dims)?]
        }
        (None, Some(split)) => dataset.graphs(split.into(), topology)?,
        (None, None) => return Err(Failure::input("usage", "one of --qid or --split is required")),
    };
    let predictions = predict(&model, &graphs)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(BufWriter::new(fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for p in &predictions {
        writeln!(out, "{}", serde_json::to_string(p)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Text and image widths implied by a star model's first layer.
fn star_dims(spec: &ModelSpec) -> Result<FeatureDims, Failure> {
    let dim = |kind| spec.input_dims.iter().find(|(k, _)| *k == kind).map(|&(_, d)| d);
    match (dim(NodeKind::Question), dim(NodeKind::ImageSource)) {
        (Some(text), Some(image_caption)) if image_caption > text => Ok(FeatureDims {
            text,
            image: image_caption - text,
        }),
        _ => Err(mmgr_core::Error::Config("checkpoint does not describe a star model's input widths".into()).into()),
    }
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    echo("bench", &a)?;
    let rng = Rng::new(a.seed);
    let mut model = match &a.model {
        Some(path) => load_checkpoint_expecting(path, Topology::Star)?,
        None => Model::init(ModelSpec::reference(Topology::Star, a.gated), &mut rng.fork(1))?,
    };
    model.set_precision(Precision::from(a.precision));
    let dims = star_dims(model.spec())?;
    let graph = random_star_graph(a.nodes, dims, &mut rng.fork(2))?;
    let config = BenchConfig {
        nodes: a.nodes,
        repeat: a.repeat,
        warmup: a.warmup,
        seed: a.seed,
    };
    let report = bench_forward(&model, &graph, &config)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    echo("synth", &a)?;
    let spec = SyntheticSpec {
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        sources_per_question: a.sources,
        positives_per_question: a.positives,
        noise_scale: a.noise,
        seed: a.seed,
        text_dim: a.text_dim,
        image_dim: a.image_dim,
        latent_dim: a.latent_dim,
        max_negative_cosine: a.max_negative_cosine,
    };
    let paths = generate_synthetic(&spec)?.write(&a.out)?;
    println!("{}", json!({"manifest": paths.manifest, "stores": paths.stores}));
    Ok(())
}
