use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmgr_core::data::Split;
use mmgr_core::{Precision, Topology};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mmgr", version, about = "Graph neural source retrieval for multimodal multihop questions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write its best-on-dev checkpoint.
    Train(TrainArgs),
    /// Score a split and report precision / recall / F1.
    Eval(EvalArgs),
    /// Emit per-source probabilities and the predicted positive set.
    Predict(PredictArgs),
    /// Time single-graph forward passes over many sources.
    Bench(BenchArgs),
    /// Write a synthetic dataset (manifest and feature stores).
    Synth(SynthArgs),
    /// Print the manifest JSON schema.
    Schema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyArg {
    Dense,
    Star,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::Dense => Topology::Dense,
            TopologyArg::Star => Topology::Star,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    /// The trained graph model.
    Gnn,
    /// Top-2 sources by word overlap with the question text.
    Lexical,
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Dataset manifest (JSON Lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature store files; repeat the flag or separate with commas.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub stores: Vec<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Graph construction per question.
    #[arg(long, value_enum, default_value_t = TopologyArg::Star)]
    pub topology: TopologyArg,
    /// Use residual gated graph convolutions instead of SAGE.
    #[arg(long, default_value_t = false)]
    pub gated: bool,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Questions per optimisation step.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = 2e-5)]
    pub lr: f64,
    /// Learning-rate decay factor per step.
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    /// Epochs between learning-rate decays.
    #[arg(long, default_value_t = 10)]
    pub lr_step: usize,
    /// Cross-entropy weight of the positive class.
    #[arg(long, default_value_t = 10.0)]
    pub w_pos: f64,
    /// Cross-entropy weight of the negative class.
    #[arg(long, default_value_t = 1.0)]
    pub w_neg: f64,
    /// AdamW decoupled weight decay.
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop once dev combined F1 reaches this value [default: off].
    #[arg(long)]
    pub stop_at_f1: Option<f64>,
    /// Matrix-product precision.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.mmgm")]
    pub out: PathBuf,
    /// Per-epoch JSON Lines log.
    #[arg(long, default_value = "train_log.jsonl")]
    pub log: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Model checkpoint (not needed with --scorer lexical).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Reject checkpoints trained for another topology [default: accept any].
    #[arg(long, value_enum)]
    pub topology: Option<TopologyArg>,
    #[arg(long, value_enum, default_value_t = Scorer::Gnn)]
    pub scorer: Scorer,
    /// Also report the mean of per-question F1.
    #[arg(long, default_value_t = false)]
    pub macro_f1: bool,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// Write the report as JSON here [default: table on stdout only].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["qid", "split"]))]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Single question id [default: none].
    #[arg(long)]
    pub qid: Option<String>,
    /// Every question of a split [default: none].
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Reject checkpoints trained for another topology [default: accept any].
    #[arg(long, value_enum)]
    pub topology: Option<TopologyArg>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// JSON Lines output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Star-topology checkpoint [default: freshly initialised model].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use gated convolutions for the freshly initialised model.
    #[arg(long, default_value_t = false)]
    pub gated: bool,
    /// Source nodes in the benchmark graph.
    #[arg(long, default_value_t = 50)]
    pub nodes: usize,
    /// Timed forward passes.
    #[arg(long, default_value_t = 20)]
    pub repeat: usize,
    /// Untimed passes before measuring.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output directory for manifest.jsonl, text.mmqf and image.mmqf.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    #[arg(long, default_value_t = 10)]
    pub sources: usize,
    #[arg(long, default_value_t = 2)]
    pub positives: usize,
    /// Expected norm of the noise added to unit-norm signals.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Dimension of the subspace signal directions are drawn from (0 = full).
    #[arg(long, default_value_t = 4)]
    pub latent_dim: usize,
    /// Largest cosine between a negative's direction and its question's (1 = no limit).
    #[arg(long, default_value_t = 0.5)]
    pub max_negative_cosine: f64,
    #[arg(long, default_value_t = 768)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 2048)]
    pub image_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
