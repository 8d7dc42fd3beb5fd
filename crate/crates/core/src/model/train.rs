//! AdamW training of the trainable parameter set, with feature distillation
//! toward the frozen per-frame teacher.

use crate::attention::VideoTensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{seeded_rng, Tape, Tensor};

use super::{argmax, MoMaModel, Mode};

use rand::seq::SliceRandom;

/// One labelled clip.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video: VideoTensor,
    pub label: usize,
}

/// Decoupled-weight-decay Adam over the model's trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: Vec<(ParamId, Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(model: &MoMaModel, cfg: &TrainConfig) -> Self {
        let store = model.store();
        let slots = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let shape = store.get(id).shape().to_vec();
                (id, Tensor::zeros(&shape), Tensor::zeros(&shape))
            })
            .collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            slots,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` belongs to the `i`-th trainable parameter.
    pub fn update(&mut self, model: &mut MoMaModel, grads: &[Tensor]) {
        if self.lr == 0.0 {
            // Keeps parameters bit-identical, including the decay term.
            self.step += 1;
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        for ((id, m, v), g) in self.slots.iter_mut().zip(grads) {
            let w = model.store_mut().get_mut(*id);
            let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                w[i] -= lr * (step + wd * w[i]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Euclidean norm of the batch-mean gradient over all trainable parameters.
    pub grad_norm: f64,
    pub correct: usize,
}

/// Loss and batch-mean gradients of the trainable parameters, without updating.
pub fn batch_gradients(
    model: &MoMaModel,
    batch: &[(&Sample, &Tensor)],
    distill_weight: f64,
) -> Result<(StepMetrics, Vec<Tensor>)> {
    let ids = model.store().trainable_ids();
    let mut grads: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(model.store().get(id).shape())).collect();
    let mut total = 0.0;
    let mut correct = 0;
    for &(sample, teacher) in batch {
        let tape = Tape::new();
        let p = model.store().bind(&tape);
        let out = model.forward(&p, &tape, &sample.video, Mode::Adapted)?;
        let loss = model.loss(&out, sample.label, teacher, distill_weight)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} on a sample with label {}; logits {:?}",
                sample.label,
                out.logits.value().data()
            )));
        }
        if argmax(out.logits.value().data()) == sample.label {
            correct += 1;
        }
        total += value;
        let mut g = tape.backward(loss)?;
        for (acc, &id) in grads.iter_mut().zip(&ids) {
            if let Some(gi) = g.take(p[id]) {
                acc.add_assign(&gi);
            }
        }
    }
    let n = batch.len().max(1) as f64;
    let mut sq = 0.0;
    for (g, &id) in grads.iter_mut().zip(&ids) {
        for x in g.data_mut() {
            *x /= n;
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", model.store().param(id).name)));
        }
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    Ok((StepMetrics { loss: total / n, grad_norm: sq.sqrt(), correct }, grads))
}

/// One optimizer step on `batch`, each sample paired with its teacher features.
pub fn train_step(
    model: &mut MoMaModel,
    opt: &mut AdamW,
    batch: &[(&Sample, &Tensor)],
    distill_weight: f64,
) -> Result<StepMetrics> {
    let (metrics, grads) = batch_gradients(model, batch, distill_weight)?;
    opt.update(model, &grads);
    Ok(metrics)
}

/// Pooled teacher features for every sample.
pub fn teacher_features(model: &MoMaModel, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| model.features(&s.video, Mode::Teacher)).collect()
}

pub fn accuracy(model: &MoMaModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in samples {
        if model.predict(&s.video)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_val_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_accuracy)
    }
}

/// Trains for `cfg.epochs` epochs of shuffled mini-batches, evaluating on `val`
/// after every epoch. Shuffling draws from its own seeded stream.
pub fn fit(model: &mut MoMaModel, cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainReport> {
    let teachers = if cfg.distill_weight == 0.0 {
        vec![Tensor::zeros(&[1, model.config().channels]); train.len()]
    } else {
        teacher_features(model, train)?
    };
    let mut opt = AdamW::new(model, cfg);
    let mut rng = seeded_rng(cfg.seed, 7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut norm_sum, mut batches) = (0.0, 0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Sample, &Tensor)> = chunk.iter().map(|&i| (&train[i], &teachers[i])).collect();
            let m = train_step(model, &mut opt, &batch, cfg.distill_weight)?;
            loss_sum += m.loss * chunk.len() as f64;
            correct += m.correct;
            norm_sum += m.grad_norm;
            batches += 1;
        }
        let n = train.len().max(1) as f64;
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy: accuracy(model, val)?,
            grad_norm: norm_sum / batches.max(1) as f64,
        });
    }
    Ok(TrainReport { epochs, steps: opt.steps() })
}
