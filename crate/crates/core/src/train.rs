//! Minimal SGD trainer (momentum, weight decay, step-decay learning rate)
//! with softmax cross-entropy, plus top-1/top-5 evaluation.
//!
//! Pruned connections are re-zeroed after every update, so a dead kernel
//! never revives. Affine and group-conv layers are not trained.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{LayerGrads, LayerOp, Model};
use crate::pruning::apply_mask;
use crate::tensor::Tensor;

/// Learning rate multiplied by `gamma` at every milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f32,
    pub milestones: Vec<usize>,
    pub gamma: f32,
}

impl LrSchedule {
    pub fn constant(lr: f32) -> Self {
        Self {
            base: lr,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn step(lr: f32, milestones: Vec<usize>, gamma: f32) -> Self {
        Self {
            base: lr,
            milestones,
            gamma,
        }
    }

    /// Rate for zero-based `epoch`.
    pub fn at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Split each batch across worker threads. Results then depend on the
    /// thread count; leave off for bit-reproducible runs.
    #[serde(default)]
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 5,
            lr: LrSchedule::constant(0.01),
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 || self.lr.base < 0.0 {
            return Err(Error::InvalidArgument("learning rate and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub loss: f32,
    pub train_accuracy: f64,
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor, usize)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if n != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    let mut grad = vec![0.0f32; n * k];
    let mut loss = 0.0f32;
    let mut correct = 0;
    for b in 0..n {
        let row = &logits.data()[b * k..(b + 1) * k];
        let label = labels[b] as usize;
        if label >= k {
            return Err(Error::index("softmax_cross_entropy", format!("label {label} >= {k} classes")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f32 = exps.iter().sum();
        loss += sum.ln() - (row[label] - max);
        for j in 0..k {
            let p = exps[j] / sum;
            grad[b * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f32;
        }
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok((loss / n as f32, Tensor::new(vec![n, k], grad)?, correct))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_grads(model: &Model, data: &Dataset, indices: &[usize], scale: f32) -> Result<(f32, usize, Vec<Option<LayerGrads>>)> {
    let (x, y) = data.batch(indices)?;
    let cache = model.forward_train(&x)?;
    let (loss, mut grad, correct) = softmax_cross_entropy(cache.logits(), &y)?;
    // rescale from the chunk mean to the full-batch mean
    for g in grad.data_mut() {
        *g *= scale;
    }
    let grads = model.backward(&cache, &grad)?;
    Ok((loss * indices.len() as f32, correct, grads))
}

fn add_into(acc: &mut [Option<LayerGrads>], other: Vec<Option<LayerGrads>>) {
    for (a, b) in acc.iter_mut().zip(other) {
        if let (Some(a), Some(b)) = (a.as_mut(), b) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x += y;
            }
        }
    }
}

/// Velocity buffers for one layer's weight and bias.
type Velocity = Option<(Vec<f32>, Vec<f32>)>;

fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, cfg: &TrainConfig) {
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let d = g + cfg.weight_decay * *w;
        *v = cfg.momentum * *v + d;
        *w -= lr * *v;
    }
}

/// Fine-tune `model` in place. Every dead connection is re-zeroed after each
/// update. Deterministic for a given seed unless `cfg.parallel` is set.
pub fn sgd_finetune(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    check_label_space(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<Velocity> = vec![None; model.layers.len()];
    let mut stats = Vec::with_capacity(cfg.epochs);
    let chunks = if cfg.parallel { rayon::current_num_threads().max(1) } else { 1 };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, hits, grads) = if chunks == 1 {
                batch_grads(model, data, batch, 1.0)?
            } else {
                let per = batch.len().div_ceil(chunks);
                let parts = batch
                    .par_chunks(per)
                    .map(|part| batch_grads(model, data, part, part.len() as f32 / batch.len() as f32))
                    .collect::<Result<Vec<_>>>()?;
                let mut iter = parts.into_iter();
                let (mut loss, mut hits, mut grads) = iter.next().expect("non-empty batch");
                for (l, h, g) in iter {
                    loss += l;
                    hits += h;
                    add_into(&mut grads, g);
                }
                (loss, hits, grads)
            };
            let mean_loss = loss / batch.len() as f32;
            if !mean_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: mean_loss,
                });
            }
            loss_sum += loss as f64;
            correct += hits;

            for ((layer, grad), vel) in model.layers.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                let Some(grad) = grad else { continue };
                let (weights, bias, mask, area) = match &mut layer.op {
                    LayerOp::Conv2d(c) => {
                        let k = c.weights.kernel();
                        (c.weights.values.data_mut(), c.bias.as_mut(), &c.mask, k * k)
                    }
                    LayerOp::Fc(f) => (f.weights.values.data_mut(), f.bias.as_mut(), &f.mask, 1),
                    _ => continue,
                };
                let (vw, vb) = vel.get_or_insert_with(|| (vec![0.0; weights.len()], vec![0.0; grad.bias.len()]));
                sgd_step(weights, grad.weight.data(), vw, lr, cfg);
                if let Some(b) = bias {
                    sgd_step(b.data_mut(), grad.bias.data(), vb, lr, cfg);
                }
                apply_mask(weights, area, mask);
                apply_mask(vw, area, mask);
            }
        }
        stats.push(EpochStats {
            epoch,
            lr,
            loss: (loss_sum / data.len() as f64) as f32,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(stats)
}

pub(crate) fn check_label_space(model: &Model, data: &Dataset) -> Result<()> {
    match model.output_width() {
        Some(w) if w == data.num_classes() => Ok(()),
        Some(w) => Err(Error::shape(
            "dataset",
            format!("model outputs {w} logits but dataset has {} classes", data.num_classes()),
        )),
        None => Err(Error::shape("dataset", "model has no classifier output")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    /// Present when the task has at least 5 classes.
    pub top5: Option<f64>,
}

/// Top-1 (and top-5) accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Accuracy> {
    check_label_space(model, data)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let k = data.num_classes();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(256) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward(&x)?;
        for (b, &label) in y.iter().enumerate() {
            let row = &logits.data()[b * k..(b + 1) * k];
            let label = label as usize;
            if argmax(row) == label {
                top1 += 1;
            }
            // classes ranked ahead of the label: larger logit, or equal with a lower index
            let ahead = (0..k)
                .filter(|&j| row[j] > row[label] || (row[j] == row[label] && j < label))
                .count();
            if ahead < 5 {
                top5 += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: top1 as f64 / n,
        top5: (k >= 5).then_some(top5 as f64 / n),
    })
}
