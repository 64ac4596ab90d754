//! Weighted cross-entropy, AdamW, StepLR and the epoch loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Modality, QuestionGraph};
use crate::layers::{Model, ModelSpec};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::tensor::{Matrix, Precision, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_gamma: f64,
    /// Epochs between learning-rate decays.
    pub lr_step_epochs: usize,
    /// `[w_neg, w_pos]`.
    pub class_weights: [f64; 2],
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop once dev combined F1 reaches this value.
    pub stop_at_dev_f1: Option<f64>,
    /// Matrix-product precision during training and validation.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            base_lr: 2e-5,
            lr_gamma: 0.9,
            lr_step_epochs: 10,
            class_weights: [1.0, 10.0],
            optimizer: AdamWConfig::default(),
            seed: 0,
            stop_at_dev_f1: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma must lie in (0, 1], got {}", self.lr_gamma));
        }
        if self.lr_step_epochs == 0 {
            return bad("lr_step_epochs must be at least 1".into());
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("class weights must be positive, got {:?}", self.class_weights));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("AdamW betas must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("AdamW eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn step_lr(epoch: usize, config: &TrainConfig) -> f64 {
    let decays = (epoch / config.lr_step_epochs.max(1)) as i32;
    config.base_lr * config.lr_gamma.powi(decays)
}

/// Mean over labelled nodes of `w[label] · −log softmax(logits)[label]`,
/// with its gradient (zero on unlabelled rows).
pub fn weighted_ce(logits: &Matrix, labels: &[u8], mask: &[bool], weights: [f64; 2]) -> Result<(f64, Matrix)> {
    if logits.cols() != 2 {
        return Err(Error::shape("weighted_ce", (logits.rows(), 2), logits.shape()));
    }
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape("weighted_ce labels", (logits.rows(), 1), (labels.len().min(mask.len()), 1)));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let probs = logits.softmax_rows();
    let mut grad = Matrix::zeros(logits.rows(), 2);
    let mut total = 0.0;
    for i in (0..logits.rows()).filter(|&i| mask[i]) {
        let y = labels[i] as usize;
        if y > 1 {
            return Err(Error::Config(format!("label {y} on row {i} is not 0 or 1")));
        }
        let w = weights[y];
        // log-softmax computed from logits directly to stay finite for large margins
        let row = logits.row(i);
        let m = row[0].max(row[1]);
        let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
        total += w * (lse - row[y]);
        for c in 0..2 {
            let onehot = if c == y { 1.0 } else { 0.0 };
            grad.set(i, c, w * (probs.get(i, c) - onehot) / count as f64);
        }
    }
    Ok((total / count as f64, grad))
}

/// First and second moments per trainable parameter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    moments: Vec<(Matrix, Matrix)>,
}

impl TrainState {
    pub fn new(model: &Model, lr: f64) -> Self {
        let moments = model
            .parameters()
            .iter()
            .map(|p| {
                let (r, c) = p.value.shape();
                (Matrix::zeros(r, c), Matrix::zeros(r, c))
            })
            .collect();
        TrainState { step: 0, lr, moments }
    }

    pub fn moments(&self) -> &[(Matrix, Matrix)] {
        &self.moments
    }
}

/// One AdamW update from the gradients currently held by `model`.
/// Frozen parameters are skipped.
pub fn adamw_step(model: &mut Model, state: &mut TrainState, config: &AdamWConfig) {
    state.step += 1;
    let t = state.step as i32;
    let lr = state.lr;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (p, (m, v)) in model.parameters_mut().into_iter().zip(state.moments.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((theta, &g), m), v) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
            *theta -= lr * config.weight_decay * *theta;
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_f1_image: f64,
    pub val_f1_text: f64,
    pub seconds: f64,
}

impl EpochLog {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &EpochLog) -> bool {
        EpochLog { seconds: 0.0, ..self.clone() } == EpochLog { seconds: 0.0, ..other.clone() }
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation F1.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_report: EvalReport,
}

/// Trains a fresh model and returns the best-by-validation checkpoint.
/// When `dev` is empty the training split is used for selection.
pub fn fit(
    train: &[QuestionGraph],
    dev: &[QuestionGraph],
    spec: ModelSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let selection = if dev.is_empty() {
        log::warn!("dev split is empty; selecting the checkpoint on training F1");
        train
    } else {
        dev
    };
    let rng = Rng::new(config.seed);
    let mut model = Model::init(spec, &mut rng.fork(1))?;
    model.set_precision(config.precision);
    let mut shuffler = rng.fork(2);
    let mut state = TrainState::new(&model, config.base_lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model, EvalReport)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        state.lr = step_lr(epoch, config);
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = batch_graphs(chunk.iter().map(|&i| &train[i]))?;
            let (logits, cache) = model.forward(&batch)?;
            let (loss, dlogits) = weighted_ce(&logits, &batch.labels(), &batch.label_mask(), config.class_weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, step });
            }
            model.zero_grad();
            model.backward(&batch, &cache, &dlogits)?;
            adamw_step(&mut model, &mut state, &config.optimizer);
            loss_sum += loss;
            batches += 1;
        }
        let report = evaluate(&model, selection, EvalOptions::default())?;
        let entry = EpochLog {
            epoch,
            lr: state.lr,
            train_loss: loss_sum / batches as f64,
            val_f1: report.combined.scores.f1,
            val_f1_image: report.modality_f1(Modality::Image),
            val_f1_text: report.modality_f1(Modality::Text),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.5} val_f1 {:.4} ({:.1}s)",
            entry.epoch,
            entry.train_loss,
            entry.val_f1,
            entry.seconds
        );
        on_epoch(&entry);
        let f1 = entry.val_f1;
        log.push(entry);
        // strict improvement only, so ties keep the earlier epoch
        if best.as_ref().is_none_or(|b| f1 > b.0) {
            best = Some((f1, epoch, model.clone(), report));
        }
        if config.stop_at_dev_f1.is_some_and(|target| f1 >= target) {
            break;
        }
    }
    let (_, best_epoch, model, best_report) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        model,
        log,
        best_epoch,
        best_report,
    })
}
