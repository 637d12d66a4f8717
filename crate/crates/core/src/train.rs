//! Minibatch momentum-SGD training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainingConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::{Sgd, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_accuracy,test_accuracy";

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            m.epoch, m.train_loss, m.train_accuracy, m.test_accuracy
        );
    }
    out
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch}, step {step}: non-finite {what}")),
        other => other,
    }
}

/// Trains `model` in place. Shuffling, dropout masks and gate noise all draw
/// from one stream seeded by `seed`, so equal seeds give bit-identical runs.
/// `on_epoch` sees each epoch's metrics as soon as they are known.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainingConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    model.temperature = cfg.temperature;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.batch(idx)?;
            let mut tape = Tape::new();
            let (logits, params) = model
                .forward_tape(&mut tape, x, Mode::Train(&mut rng))
                .map_err(|e| diverged(epoch, step, e))?;
            correct += tape
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            let loss = tape.softmax_cross_entropy(logits, &labels).map_err(|e| diverged(epoch, step, e))?;
            let loss_value = tape.value(loss).sum();
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}, step {step}: loss is {loss_value}")));
            }
            loss_sum += loss_value * idx.len() as f64;
            tape.backward(loss).map_err(|e| diverged(epoch, step, e))?;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut model.parameters_mut(), &grad_refs)?;
            if model.parameters().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence(format!("epoch {epoch}, step {step}: parameters became non-finite")));
            }
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy: model.accuracy(test)?,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(metrics)
}
