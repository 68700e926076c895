//! Training engine: batched backprop, SGD with momentum, fitting and
//! evaluation.

mod backprop;
mod params;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archdsl::{ArchGraph, ShapeError, TensorShape};
use crate::data::{DatasetSplit, LabeledImage};
use crate::runtime::{ExecutionPlan, RuntimeConfig, RuntimeError, Tensor};

pub use backprop::{cross_entropy, logits_index, loss_and_grads, predict_logits, BatchStats, LossAndGrads, Mode};
pub use params::{weight_dims, BatchNormParams, Gradients, ModelParams, NodeGrads, NodeParams, ParamsError};

pub const BN_EPSILON: f32 = 1e-5;
/// Weight of the previous running statistic in each batch-norm update.
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("input of {len} values is not a whole batch of {expected} images")]
    InputShape { expected: TensorShape, len: usize },
    #[error("{images} images but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("node `{0}` has no parameters")]
    MissingParams(String),
    #[error("training diverged (non-finite loss)")]
    Divergence,
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("image {id} is {got}, model expects {expected}")]
    ImageSize { id: String, got: TensorShape, expected: TensorShape },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal/vertical flips.
    pub augment: bool,
    /// Multiply the learning rate by 0.1 at 50% and again at 75% of the
    /// epochs.
    pub step_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            augment: true,
            step_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let mut lr = self.learning_rate;
        if self.step_decay && self.epochs > 0 {
            if 2 * epoch >= self.epochs {
                lr *= 0.1;
            }
            if 4 * epoch >= 3 * self.epochs {
                lr *= 0.1;
            }
        }
        lr
    }
}

/// Momentum buffers, one per learnable tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState {
    pub velocity: Vec<Vec<f32>>,
}

/// `v = momentum * v + g + weight_decay * w; w -= lr * v`. Batch-norm running
/// statistics are not touched.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptState, lr: f32, momentum: f32, weight_decay: f32) {
    let tensors = params.learnable_mut();
    let gs = grads.tensors();
    if state.velocity.len() != tensors.len() {
        state.velocity = gs.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for ((w, g), v) in tensors.into_iter().zip(gs).zip(&mut state.velocity) {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *wi;
            *wi -= lr * *vi;
        }
    }
}

impl ModelParams {
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (p, s) in self.nodes.iter_mut().zip(&stats.nodes) {
            let (Some(p), Some((mean, var))) = (p, s) else { continue };
            let Some(bn) = p.bn.as_mut() else { continue };
            for (r, m) in bn.running_mean.iter_mut().zip(mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in bn.running_var.iter_mut().zip(var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Checkpoint with the highest test accuracy (earliest on ties); the
    /// initial weights count as epoch 0.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub curve: Vec<EpochStats>,
    pub diverged: bool,
}

impl FitResult {
    pub fn write_curve_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,test_acc")?;
        for e in &self.curve {
            writeln!(f, "{},{:.6},{:.4}", e.epoch, e.train_loss, e.test_accuracy)?;
        }
        f.flush()
    }
}

fn check_images(images: &[LabeledImage], expected: TensorShape) -> Result<(), TrainError> {
    for img in images {
        let got = TensorShape::new(img.height, img.width, 1);
        if got != expected {
            return Err(TrainError::ImageSize { id: img.source_id.clone(), got, expected });
        }
    }
    Ok(())
}

fn flip_into(img: &LabeledImage, horizontal: bool, vertical: bool, out: &mut Vec<f32>) {
    let (h, w) = (img.height, img.width);
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            out.push(img.pixels[sy * w + sx]);
        }
    }
}

/// Trains with mini-batch SGD, evaluating on the test split after every
/// epoch.
pub fn fit(graph: &ArchGraph, split: &DatasetSplit, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_from(graph, split, cfg, ModelParams::init(graph, cfg.seed)?)
}

pub fn fit_from(
    graph: &ArchGraph,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    initial: ModelParams,
) -> Result<FitResult, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if split.test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let input = graph.shapes()?[0];
    check_images(&split.train, input)?;
    check_images(&split.test, input)?;
    initial.validate(graph)?;

    let mut params = initial;
    let mut best = params.clone();
    let mut best_accuracy = evaluate(graph, &params, &split.test)?.accuracy_pct;
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut opt = OptState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f17e);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let batch_size = cfg.batch_size.max(1);
    let mut diverged = false;
    let mut batch = Vec::new();
    let mut labels = Vec::new();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            labels.clear();
            for &i in chunk {
                let img = &split.train[i];
                let (h, v) = if cfg.augment { (rng.gen_bool(0.5), rng.gen_bool(0.5)) } else { (false, false) };
                flip_into(img, h, v, &mut batch);
                labels.push(img.label);
            }
            let step = match loss_and_grads(graph, &params, &batch, &labels) {
                Ok(s) => s,
                Err(TrainError::Divergence) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            sgd_step(&mut params, &step.grads, &mut opt, lr, cfg.momentum, cfg.weight_decay);
            params.update_running_stats(&step.batch_stats);
            if params.validate(graph).is_err() {
                diverged = true;
                break 'epochs;
            }
            loss_sum += step.loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let accuracy = evaluate(graph, &params, &split.test)?.accuracy_pct;
        curve.push(EpochStats { epoch: epoch + 1, train_loss: loss_sum / seen as f64, test_accuracy: accuracy });
        if accuracy > best_accuracy {
            best_accuracy = accuracy;
            best_epoch = epoch + 1;
            best = params.clone();
        }
    }
    Ok(FitResult { params: best, best_epoch, best_accuracy, curve, diverged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy_pct: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Packs grayscale images into an NHWC batch tensor.
pub fn images_to_tensor(images: &[LabeledImage]) -> Tensor {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new([images.len(), h, w, 1], data)
}

pub fn confusion_from_predictions(labels: &[usize], predicted: &[usize], classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in labels.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let total = labels.len().max(1) as f64;
    Evaluation { accuracy_pct: correct as f64 / total * 100.0, confusion }
}

/// Test accuracy through the inference runtime (batch norm from running
/// statistics).
pub fn evaluate(graph: &ArchGraph, params: &ModelParams, test: &[LabeledImage]) -> Result<Evaluation, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    check_images(test, graph.shapes()?[0])?;
    let cfg = RuntimeConfig { num_threads: 1, cpu_affinity: String::new(), ..RuntimeConfig::default() };
    let plan = ExecutionPlan::build(graph, params, &cfg)?;
    let classes = graph.num_outputs()?;
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in test.chunks(64) {
        let probs = plan.infer(&images_to_tensor(chunk))?;
        predicted.extend(probs.chunks_exact(classes).map(argmax));
    }
    let labels: Vec<usize> = test.iter().map(|i| i.label).collect();
    Ok(confusion_from_predictions(&labels, &predicted, classes))
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
