//! Minibatch SGD driver shared by reference training and fine-tuning.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{backward, predict, sgd_step};
use crate::compression::group_sparsity_regularizer;
use crate::data::Split;
use crate::error::{domain, Error, Result};
use crate::losses::{combined_loss_on_batch, LossConfig, LossTerm, TermValues};
use crate::models::{Network, ParamKind};
use crate::rng::SeededRng;
use crate::tensor::{ClassLayout, Tensor};
use crate::weighting::Weighting;

/// Epoch-based step schedule; the learning rate is multiplied by
/// `lr_decay` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub milestones: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default = "default_decay"))]
    pub lr_decay: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_momentum"))]
    pub momentum: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_weight_decay"))]
    pub weight_decay: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_batch"))]
    pub batch_size: usize,
}

#[cfg(feature = "serde")]
fn default_decay() -> f64 {
    0.1
}
#[cfg(feature = "serde")]
fn default_momentum() -> f64 {
    0.9
}
#[cfg(feature = "serde")]
fn default_weight_decay() -> f64 {
    1e-4
}
#[cfg(feature = "serde")]
fn default_batch() -> usize {
    64
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.05,
            milestones: Vec::new(),
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(domain("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(domain("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(domain("momentum must be in [0, 1), weight decay and lr decay nonnegative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * libm::pow(self.lr_decay, passed as f64)
    }

    /// Same schedule stretched or shrunk to `epochs`, milestones scaled
    /// proportionally.
    pub fn rescaled(&self, epochs: usize) -> Schedule {
        let milestones = if self.epochs == 0 {
            Vec::new()
        } else {
            self.milestones
                .iter()
                .map(|m| (m * epochs).div_ceil(self.epochs))
                .collect()
        };
        Schedule {
            epochs,
            milestones,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: TermValues,
    /// Largest `|sum(weights) - 1|` seen in the epoch.
    pub max_simplex_error: f64,
    pub min_weight: f64,
    pub steps: usize,
}

/// Everything the driver needs besides the network and the data.
pub struct Objective<'a> {
    pub loss: &'a LossConfig,
    pub weighting: &'a mut Weighting,
    pub teacher: Option<&'a Network>,
    /// Group-sparsity factor applied to every adapter matrix.
    pub group_lambda: f64,
}

/// Trains `net` in place for `schedule.epochs` epochs of shuffled minibatches.
pub fn fit(
    net: &mut Network,
    data: &Split,
    schedule: &Schedule,
    objective: Objective<'_>,
    shuffle: &mut SeededRng,
) -> Result<Vec<EpochLog>> {
    fit_with(net, data, schedule, objective, shuffle, |_, _| Ok(()))
}

/// [`fit`] with a hook called after every epoch.
pub fn fit_with<F>(
    net: &mut Network,
    data: &Split,
    schedule: &Schedule,
    objective: Objective<'_>,
    shuffle: &mut SeededRng,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &Network) -> Result<()>,
{
    schedule.validate()?;
    if objective.loss.needs_teacher() && objective.teacher.is_none() {
        return Err(crate::error::config("alignment losses need a reference network"));
    }
    if objective.weighting.terms() != objective.loss.terms.as_slice() {
        return Err(crate::error::config("weighting and loss config disagree on active terms"));
    }
    net.reset_velocity();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(schedule.epochs);
    let mut global_step = 0usize;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut term_sums = [0.0; 4];
        let mut steps = 0;
        let mut max_simplex_error: f64 = 0.0;
        let mut min_weight = f64::INFINITY;
        for chunk in order.chunks(schedule.batch_size) {
            let (inputs, labels) = data.batch(chunk);
            let weights = objective.weighting.weights().clone();
            max_simplex_error = max_simplex_error.max(libm::fabs(weights.sum() - 1.0));
            min_weight = min_weight.min(weights.min());

            net.zero_grads();
            let (loss, mut tape) =
                combined_loss_on_batch(objective.loss, &weights, &inputs, &labels, net, objective.teacher)?;
            let mut value = loss.value;
            if objective.group_lambda > 0.0 {
                value += add_group_penalty(net, objective.group_lambda);
            }
            if !value.is_finite() {
                return Err(Error::Diverged { step: global_step });
            }
            backward(net, &mut tape, &loss.grad)?;
            sgd_step(net, lr, schedule.momentum, schedule.weight_decay)?;
            objective.weighting.observe(&loss.terms, lr);

            loss_sum += value;
            for t in LossTerm::ALL {
                if let Some(v) = loss.terms.get(t) {
                    term_sums[t.index()] += v;
                }
            }
            steps += 1;
            global_step += 1;
        }
        let mut terms = TermValues::default();
        for &t in &objective.loss.terms {
            terms.set(t, term_sums[t.index()] / steps.max(1) as f64);
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / steps.max(1) as f64,
            terms,
            max_simplex_error,
            min_weight,
            steps,
        };
        on_epoch(&log, net)?;
        logs.push(log);
    }
    net.zero_grads();
    net.reset_velocity();
    Ok(logs)
}

/// Adds `lambda * dR/dA` to each adapter gradient and returns `lambda * R`.
fn add_group_penalty(net: &mut Network, lambda: f64) -> f64 {
    let mut total = 0.0;
    for p in net.params_mut().iter_mut().filter(|p| p.kind == ParamKind::Adapter) {
        let (v, g) = group_sparsity_regularizer(&p.value);
        total += lambda * v;
        for (acc, gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *acc += lambda * gv;
        }
    }
    total
}

/// Predicted class per position, evaluated in fixed-size chunks.
pub fn predict_classes(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.batch();
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(256) {
        let logits = predict(net, &inputs.gather_batch(chunk))?;
        let layout = ClassLayout::of(&logits)?;
        out.extend(layout.argmax(logits.data()));
    }
    Ok(out)
}

/// Fraction of positions predicted correctly.
pub fn accuracy(net: &Network, data: &Split) -> Result<f64> {
    let pred = predict_classes(net, &data.inputs)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.labels.len() as f64)
}

/// Logits for a whole split (used to cache reference outputs in tests and tools).
pub fn logits_for(net: &Network, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.batch();
    let idx: Vec<usize> = (0..n).collect();
    let mut data = Vec::new();
    let mut shape = vec![];
    for chunk in idx.chunks(256) {
        let logits = predict(net, &inputs.gather_batch(chunk))?;
        shape = logits.shape().to_vec();
        data.extend_from_slice(logits.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}
