//! Mini-batch SGD with (Nesterov) momentum, L2 weight decay and a step
//! learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::{batch_loss_rows, LossSpec};
use crate::models::{Mode, Model};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// `(epoch_fraction, divisor)`: from epoch `floor(fraction * epochs)`
    /// on, the rate is divided by `divisor` (cumulatively).
    pub schedule: Vec<(f64, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimSpec {
    /// The MNIST protocol: 30 epochs of batch 64 at 0.05, Nesterov 0.9,
    /// weight decay 1e-4, divided by 10 at 50% and 75%.
    fn default() -> Self {
        OptimSpec {
            lr0: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            schedule: vec![(0.5, 10.0), (0.75, 10.0)],
            epochs: 30,
            batch_size: 64,
        }
    }
}

impl OptimSpec {
    /// The CIFAR protocol: 300 epochs from 0.1, batch 256.
    pub fn cifar() -> Self {
        OptimSpec {
            lr0: 0.1,
            epochs: 300,
            batch_size: 256,
            ..OptimSpec::default()
        }
    }

    /// The SVHN protocol: 40 epochs from 0.1, batch 64.
    pub fn svhn() -> Self {
        OptimSpec {
            lr0: 0.1,
            epochs: 40,
            batch_size: 64,
            ..OptimSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 must be >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        let mut prev = 0.0;
        for &(frac, div) in &self.schedule {
            if !(frac > prev && frac < 1.0) {
                return bad(format!("schedule fractions must increase strictly within (0, 1), got {frac}"));
            }
            if !(div > 1.0 && div.is_finite()) {
                return bad(format!("schedule divisors must exceed 1, got {div}"));
            }
            prev = frac;
        }
        Ok(())
    }
}

/// Learning rate for a 0-based `epoch`.
pub fn lr_at(spec: &OptimSpec, epoch: usize) -> Result<f64> {
    if epoch >= spec.epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside 0..{}",
            spec.epochs
        )));
    }
    let mut lr = spec.lr0;
    for &(frac, div) in &spec.schedule {
        if epoch >= (frac * spec.epochs as f64).floor() as usize {
            lr /= div;
        }
    }
    Ok(lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// One buffer per parameter tensor, in [`Model::parameters`] order.
    pub velocity: Vec<Vec<f64>>,
    pub epoch: usize,
    pub step: usize,
    pub current_lr: f64,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(model: &Model, spec: &OptimSpec, seed: u64) -> Self {
        TrainState {
            velocity: model.parameters().iter().map(|p| vec![0.0; p.len()]).collect(),
            epoch: 0,
            step: 0,
            current_lr: spec.lr0,
            rng_seed: seed,
        }
    }
}

/// One update at `state.current_lr`, then zeroes the gradients.
///
/// With `g = grad + wd * w`: `v <- mu*v - lr*g`, and `w <- w + mu*v - lr*g`
/// (Nesterov) or `w <- w + v`.
pub fn sgd_step(model: &mut Model, state: &mut TrainState, spec: &OptimSpec) -> Result<()> {
    if !model.grads_ready() {
        return Err(Error::State("sgd_step before backward".into()));
    }
    let lr = state.current_lr;
    let (mu, wd) = (spec.momentum, spec.weight_decay);
    let slots = model.param_slots();
    if slots.len() != state.velocity.len()
        || slots.iter().zip(&state.velocity).any(|(s, v)| s.value.len() != v.len())
    {
        return Err(Error::State("velocity buffers do not match the model".into()));
    }
    for (slot, vel) in slots.into_iter().zip(state.velocity.iter_mut()) {
        for ((w, &g), v) in slot.value.iter_mut().zip(slot.grad.iter()).zip(vel.iter_mut()) {
            let g = g + wd * *w;
            *v = mu * *v - lr * g;
            *w += if spec.nesterov { mu * *v - lr * g } else { *v };
        }
    }
    model.zero_grad();
    state.step += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub test_error_pct: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Percentage of misclassified samples, predicting in eval mode.
pub fn error_pct(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = model.predict(inputs)?;
    let wrong = preds.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Trains `model` in place for `optim.epochs` epochs.
///
/// Each epoch shuffles the training indices with a generator seeded by
/// `seed`, walks them in mini-batches (the short remainder batch is kept),
/// then evaluates test error in eval mode and passes the [`EpochLog`] to
/// `sink`. The model is left in eval mode.
pub fn fit(
    model: &mut Model,
    dataset: &Dataset,
    loss: &LossSpec,
    optim: &OptimSpec,
    seed: u64,
    augmentation: Option<&AugmentSpec>,
    mut sink: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    optim.validate()?;
    loss.validate()?;
    if model.input_shape() != dataset.input_shape.as_slice() || model.class_count() != dataset.class_count {
        return Err(Error::Shape(format!(
            "model takes {:?} -> {} classes, dataset has {:?} -> {}",
            model.input_shape(),
            model.class_count(),
            dataset.input_shape,
            dataset.class_count
        )));
    }
    let classes = model.class_count();
    let mut state = TrainState::new(model, optim, seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(seed);
    augment_rng.set_stream(AUGMENT_STREAM);

    let train = &dataset.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(optim.epochs);
    let started = Instant::now();
    let mut grad = Vec::new();

    for epoch in 0..optim.epochs {
        state.epoch = epoch;
        state.current_lr = lr_at(optim, epoch)?;
        model.set_mode(Mode::Train);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(optim.batch_size) {
            let mut batch = train.select(idx);
            if let Some(spec) = augmentation {
                batch = augment(&batch, spec, &mut augment_rng)?;
            }
            let logits = model.forward(batch.inputs())?;
            let diverged = |value: f64| Error::Divergence {
                epoch: epoch + 1,
                step: state.step,
                loss: value,
            };
            if !logits.is_finite() {
                return Err(diverged(f64::NAN));
            }
            grad.resize(logits.len(), 0.0);
            let value = batch_loss_rows(loss, logits.data(), classes, batch.labels(), &mut grad)?;
            if !value.is_finite() {
                return Err(diverged(value));
            }
            loss_sum += value * idx.len() as f64;
            let dlogits = Tensor::new(logits.shape().to_vec(), std::mem::take(&mut grad))?;
            model.backward_params(&dlogits)?;
            grad = dlogits.into_data();
            sgd_step(model, &mut state, optim)?;
        }
        model.set_mode(Mode::Eval);
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            test_error_pct: error_pct(model, dataset.test.inputs(), dataset.test.labels())?,
            lr: state.current_lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {} loss {:.5} test error {:.2}% lr {}",
            log.epoch,
            log.train_loss,
            log.test_error_pct,
            log.lr
        );
        sink(&log)?;
        logs.push(log);
    }
    Ok(logs)
}
