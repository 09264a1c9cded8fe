//! Minibatch SGD with momentum and weight decay, plus accuracy evaluation.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, DatasetSplit};
use crate::error::{Error, Result};
use crate::explain::argmax;
use crate::model::ModelGraph;
use crate::se::select_top_channels;
use crate::tensor::{softmax_cross_entropy, Scalar, Tensor};

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_BATCH_SIZE: usize = 64;

const EVAL_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training split used, drawn once by `seed`.
    pub subset_fraction: f64,
    /// Random flip and padded crop on training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            subset_fraction: 1.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "train_config";
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(op, format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::invalid(op, "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(op, "batch size must be at least 1"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid(op, format!("subset fraction {} outside (0, 1]", self.subset_fraction)));
        }
        Ok(())
    }
}

/// `v <- momentum * v + g + weight_decay * p; p <- p - lr * v` for every tensor.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("sgd_step", "gradient count", params.len(), grads.len()));
    }
    if velocity.len() != params.len() {
        return Err(Error::shape("sgd_step", "velocity count", params.len(), velocity.len()));
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("sgd_step", "parameter length", p.len(), g.len()));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + gi + wd * *pi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub test_acc: f64,
}

impl EpochStats {
    pub fn progress_line(&self) -> String {
        format!("epoch={} loss={:.6} test_acc={:.4}", self.epoch, self.loss, self.test_acc)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Loss of every minibatch, in order.
    pub batch_losses: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,test_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.loss, e.test_acc).expect("write to String");
        }
        out
    }
}

/// Training-set indices kept for `fraction`, drawn by `seed`.
pub fn subset_indices(len: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..len).collect();
    if fraction < 1.0 {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5B5E_7000));
        ids.truncate(((len as f64 * fraction).ceil() as usize).clamp(1, len));
        ids.sort_unstable();
    }
    ids
}

/// Trains `model` in place. Data order and augmentation come from `cfg.seed`;
/// `progress` is called after every epoch.
pub fn train(
    model: &mut ModelGraph,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<History> {
    cfg.validate()?;
    if train_split.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = subset_indices(train_split.len(), cfg.subset_fraction, cfg.seed);
    let mut velocity: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        ids.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in ids.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let item = &train_split.images[i];
                images.push(if cfg.augment {
                    augment(&item.pixels, &mut rng)?
                } else {
                    item.pixels.clone()
                });
                labels.push(item.label);
            }
            let batch = Tensor::stack(&images)?;
            let trace = model.forward_trace(&batch)?;
            let (loss, logit_grad) = softmax_cross_entropy(&trace.logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::invalid("train", format!("loss diverged at epoch {epoch}")));
            }
            let grads: Vec<Tensor<f32>> = model.backward(&trace, &logit_grad)?.params.into_iter().flatten().collect();
            sgd_step(&mut model.params_mut(), &grads, &mut velocity, cfg.lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss * chunk.len() as f64;
            history.batch_losses.push(loss);
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / ids.len() as f64,
            test_acc: evaluate(model, test_split)?,
        };
        progress(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Predicted class per image using `logits_fn(batch, first_id)`, in split order.
pub fn predict_with<F>(split: &DatasetSplit, mut logits_fn: F) -> Result<Vec<usize>>
where
    F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    if split.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(split.len());
    let ids: Vec<usize> = (0..split.len()).collect();
    for chunk in ids.chunks(EVAL_BATCH) {
        let (batch, _) = split.batch(chunk)?;
        let logits = logits_fn(&batch, chunk[0])?;
        let (_, k) = logits.dims2("predict")?;
        predictions.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(predictions)
}

fn accuracy(split: &DatasetSplit, predictions: &[usize]) -> f64 {
    let correct = split
        .images
        .iter()
        .zip(predictions)
        .filter(|(im, &p)| im.label == p)
        .count();
    correct as f64 / split.len() as f64
}

/// Top-1 accuracy without augmentation.
pub fn evaluate(model: &ModelGraph, split: &DatasetSplit) -> Result<f64> {
    let predictions = predict_with(split, |batch, _| Ok(model.forward(batch)?.logits))?;
    Ok(accuracy(split, &predictions))
}

/// `matrix[label][prediction]` counts.
pub fn confusion_matrix(model: &ModelGraph, split: &DatasetSplit) -> Result<Vec<Vec<usize>>> {
    let predictions = predict_with(split, |batch, _| Ok(model.forward(batch)?.logits))?;
    let k = model.num_classes.max(split.num_classes);
    let mut matrix = vec![vec![0; k]; k];
    for (im, &p) in split.images.iter().zip(&predictions) {
        matrix[im.label][p] += 1;
    }
    Ok(matrix)
}

/// Accuracy when only the SE-selected top `fraction` of channels is kept.
/// With `control_seed`, each image instead keeps the same number of channels
/// drawn uniformly at random.
pub fn ablation_accuracy(model: &ModelGraph, split: &DatasetSplit, fraction: f64, control_seed: Option<u64>) -> Result<f64> {
    if !model.se_enabled() {
        return Err(Error::NoSeBlock);
    }
    let predictions = match control_seed {
        None => predict_with(split, |batch, _| model.forward_ablated(batch, fraction))?,
        Some(seed) => predict_with(split, |batch, first| {
            model.forward_masked(batch, |n, v| {
                let k = select_top_channels(&v.s, fraction)?.indices.len();
                let id = (first + n) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id);
                Ok(index::sample(&mut rng, v.s.len(), k).into_vec())
            })
        })?,
    };
    Ok(accuracy(split, &predictions))
}
