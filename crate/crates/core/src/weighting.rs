//! Loss-weighting schemes: Uniform, Learnable (softmax over raw parameters
//! with weight decay), SoftAdapt (softmax over normalized windowed loss
//! changes) and the one-hot Round-Robin / Random baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config, Result};
use crate::losses::{LossTerm, TermValues};
use crate::rng::{SeededRng, Stream};

/// Weight per active loss term.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<(LossTerm, f64)>);

impl Weights {
    pub fn from_pairs(pairs: &[(LossTerm, f64)]) -> Self {
        Self(pairs.to_vec())
    }

    fn from_terms(terms: &[LossTerm], values: &[f64]) -> Self {
        Self(terms.iter().copied().zip(values.iter().copied()).collect())
    }

    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.0.iter().find(|(t, _)| *t == term).map(|(_, w)| *w)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LossTerm, f64)> + '_ {
        self.0.iter().copied()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|(_, w)| *w).collect()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().map(|(_, w)| w).sum()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().map(|(_, w)| *w).fold(f64::INFINITY, f64::min)
    }

    /// Exactly `terms` are weighted, weights are nonnegative and sum to one.
    pub fn check_covers(&self, terms: &[LossTerm]) -> Result<()> {
        let same = self.0.len() == terms.len() && terms.iter().all(|t| self.get(*t).is_some());
        if !same {
            return Err(config("weights must cover exactly the active loss terms"));
        }
        if self.0.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(config("loss weights must be nonnegative"));
        }
        if libm::fabs(self.sum() - 1.0) > 1e-9 {
            return Err(config(format!("loss weights sum to {}, not 1", self.sum())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scheme {
    Uniform,
    Learnable,
    SoftAdapt,
    RoundRobin,
    Random,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::Learnable => "learnable",
            Scheme::SoftAdapt => "softadapt",
            Scheme::RoundRobin => "round_robin",
            Scheme::Random => "random",
        }
    }

    pub fn is_one_hot(self) -> bool {
        matches!(self, Scheme::RoundRobin | Scheme::Random)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct WeightingParams {
    /// Weight decay on the Learnable raw parameters.
    pub learnable_decay: f64,
    /// SoftAdapt temperature; positive favours the worst-performing loss.
    pub softadapt_eta: f64,
    pub epsilon: f64,
    /// SoftAdapt update period in optimization steps.
    pub period: usize,
}

impl Default for WeightingParams {
    fn default() -> Self {
        Self {
            learnable_decay: 1.0,
            softadapt_eta: 1.0,
            epsilon: 1e-8,
            period: 10,
        }
    }
}

/// Equal share for every active term.
pub fn uniform_weights(terms: &[LossTerm]) -> Result<Weights> {
    if terms.is_empty() {
        return Err(config("no active loss terms"));
    }
    let w = 1.0 / terms.len() as f64;
    Ok(Weights::from_terms(terms, &vec![w; terms.len()]))
}

pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    crate::autodiff::softmax_row(&mut v, 1.0);
    v
}

/// SoftAdapt weights from per-term loss changes.
///
/// Each change is divided by `sum(changes) + eps` and the weights are
/// `softmax(eta * normalized)`. All-zero changes give uniform weights.
pub fn softadapt_weights(deltas: &[f64], eta: f64, eps: f64) -> Vec<f64> {
    if deltas.iter().all(|d| *d == 0.0) {
        return vec![1.0 / deltas.len() as f64; deltas.len()];
    }
    let denom = deltas.iter().sum::<f64>() + eps;
    let scaled: Vec<f64> = deltas.iter().map(|d| eta * d / denom).collect();
    softmax(&scaled)
}

/// Gradient of `sum_k softmax(raw)_k * values_k + decay * |raw|^2` w.r.t. `raw`.
pub fn learnable_gradient(raw: &[f64], values: &[f64], decay: f64) -> Vec<f64> {
    let w = softmax(raw);
    let mean: f64 = w.iter().zip(values).map(|(a, v)| a * v).sum();
    w.iter()
        .zip(values)
        .zip(raw)
        .map(|((a, v), r)| a * (v - mean) + 2.0 * decay * r)
        .collect()
}

/// Per-run weighting state. Call [`Weighting::weights`] before a step and
/// [`Weighting::observe`] after it.
#[derive(Debug, Clone)]
pub struct Weighting {
    scheme: Scheme,
    terms: Vec<LossTerm>,
    params: WeightingParams,
    current: Weights,
    raw: Vec<f64>,
    window_sum: Vec<f64>,
    window_len: usize,
    prev_window_mean: Option<Vec<f64>>,
    step: u64,
    rng: SeededRng,
}

impl Weighting {
    pub fn new(scheme: Scheme, terms: &[LossTerm], params: WeightingParams, seed: u64) -> Result<Self> {
        if scheme == Scheme::SoftAdapt && params.period == 0 {
            return Err(config("SoftAdapt period must be at least one step"));
        }
        let current = uniform_weights(terms)?;
        let mut w = Self {
            scheme,
            terms: terms.to_vec(),
            params,
            current,
            raw: vec![0.0; terms.len()],
            window_sum: vec![0.0; terms.len()],
            window_len: 0,
            prev_window_mean: None,
            step: 0,
            rng: SeededRng::new(seed, Stream::LossChoice),
        };
        w.refresh_one_hot();
        Ok(w)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn terms(&self) -> &[LossTerm] {
        &self.terms
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn raw_params(&self) -> &[f64] {
        &self.raw
    }

    /// Weights to use for the current optimization step.
    pub fn weights(&self) -> &Weights {
        &self.current
    }

    /// Feeds the unweighted term values of the step just taken and advances
    /// to the next step. `lr` drives the Learnable raw-parameter update.
    pub fn observe(&mut self, values: &TermValues, lr: f64) {
        let vals: Vec<f64> = self.terms.iter().map(|t| values.get(*t).unwrap_or(0.0)).collect();
        match self.scheme {
            Scheme::Uniform | Scheme::RoundRobin | Scheme::Random => {}
            Scheme::Learnable => self.learnable_update(&vals, lr),
            Scheme::SoftAdapt => self.softadapt_update(&vals),
        }
        self.step += 1;
        self.refresh_one_hot();
    }

    /// One gradient step on the raw parameters; weights become their softmax.
    pub fn learnable_update(&mut self, values: &[f64], lr: f64) {
        let g = learnable_gradient(&self.raw, values, self.params.learnable_decay);
        for (r, gk) in self.raw.iter_mut().zip(g) {
            *r -= lr * gk;
        }
        self.current = Weights::from_terms(&self.terms, &softmax(&self.raw));
    }

    /// Accumulates one step into the window; at the end of each window the
    /// change in window means drives new weights.
    pub fn softadapt_update(&mut self, values: &[f64]) {
        for (s, v) in self.window_sum.iter_mut().zip(values) {
            *s += v;
        }
        self.window_len += 1;
        if self.window_len < self.params.period {
            return;
        }
        let mean: Vec<f64> = self.window_sum.iter().map(|s| s / self.window_len as f64).collect();
        if let Some(prev) = &self.prev_window_mean {
            let deltas: Vec<f64> = mean.iter().zip(prev).map(|(c, p)| c - p).collect();
            let w = softadapt_weights(&deltas, self.params.softadapt_eta, self.params.epsilon);
            self.current = Weights::from_terms(&self.terms, &w);
        }
        self.prev_window_mean = Some(mean);
        self.window_sum.iter_mut().for_each(|s| *s = 0.0);
        self.window_len = 0;
    }

    fn refresh_one_hot(&mut self) {
        let pick = match self.scheme {
            Scheme::RoundRobin => round_robin_index(self.step, self.terms.len()),
            Scheme::Random => self.rng.index(self.terms.len()),
            _ => return,
        };
        let mut w = vec![0.0; self.terms.len()];
        w[pick] = 1.0;
        self.current = Weights::from_terms(&self.terms, &w);
    }
}

/// Term selected at `step` when cycling in declaration order.
pub fn round_robin_index(step: u64, n_terms: usize) -> usize {
    (step % n_terms as u64) as usize
}
