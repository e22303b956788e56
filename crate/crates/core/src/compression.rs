//! Producing the compressed network: iterative magnitude pruning with
//! fine-tuning after every step, and group-sparsity channel adapters that
//! are folded back into the preceding layer after training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Split;
use crate::error::{config, domain, Error, Result};
use crate::losses::{LossConfig, TermValues};
use crate::models::{identity, LayerSpec, Network, ParamKind, Parameter};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;
use crate::train::{fit, predict_classes, Objective, Schedule};
use crate::weighting::{Scheme, Weighting, WeightingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Method {
    Magnitude,
    GroupSparsity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scope {
    PerLayer,
    Global,
}

/// How the per-step fraction turns into a sparsity target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StepRule {
    /// Each step prunes the fraction of the weights still alive.
    Geometric,
    /// Step `k` targets `k * fraction` of all prunable weights.
    Additive,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct CompressionPlan {
    pub method: Method,
    pub per_step_fraction: f64,
    pub num_steps: usize,
    pub finetune_epochs_per_step: usize,
    pub scope: Scope,
    pub step_rule: StepRule,
    /// Group-sparsity regularization factor.
    pub lambda: f64,
    /// Adapter learning rate as a multiple of the model learning rate.
    pub lr_ratio: f64,
    /// Adapter columns with norm below this multiple of the mean column
    /// norm are removed when folding.
    pub column_threshold: f64,
    /// Layers that receive an adapter (group-sparsity method only).
    pub adapter_layers: Vec<usize>,
}

impl Default for CompressionPlan {
    fn default() -> Self {
        Self {
            method: Method::Magnitude,
            per_step_fraction: 0.2,
            num_steps: 4,
            finetune_epochs_per_step: 20,
            scope: Scope::PerLayer,
            step_rule: StepRule::Geometric,
            lambda: 2e-4,
            lr_ratio: 0.01,
            column_threshold: 1e-2,
            adapter_layers: Vec::new(),
        }
    }
}

impl CompressionPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.per_step_fraction > 0.0 && self.per_step_fraction < 1.0) {
            return Err(domain("per-step fraction must lie in (0, 1)"));
        }
        if !(self.lambda >= 0.0) || !(self.lr_ratio > 0.0) || !(self.column_threshold >= 0.0) {
            return Err(domain("lambda and column threshold must be nonnegative, lr ratio positive"));
        }
        if self.method == Method::GroupSparsity && self.adapter_layers.is_empty() {
            return Err(config("group sparsity needs at least one adapter layer"));
        }
        Ok(())
    }
}

fn magnitude_order(values: &[f64], mask: &[f64]) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..values.len()).filter(|&i| mask[i] != 0.0).collect();
    alive.sort_by(|&a, &b| libm::fabs(values[a]).total_cmp(&libm::fabs(values[b])).then(a.cmp(&b)));
    alive
}

fn prune_entry(p: &mut Parameter, i: usize) {
    p.mask.data_mut()[i] = 0.0;
    p.value.data_mut()[i] = 0.0;
    p.velocity[i] = 0.0;
}

/// Zeroes `floor(fraction * survivors)` of the smallest-magnitude surviving
/// weights, per layer or across all prunable weights. Biases and adapters
/// are never pruned; ties go to the lower index. Returns the count pruned.
pub fn magnitude_prune(net: &mut Network, fraction: f64, scope: Scope) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(domain("pruning fraction must lie in (0, 1)"));
    }
    match scope {
        Scope::PerLayer => {
            let mut total = 0;
            for p in net.params_mut().iter_mut().filter(|p| p.prunable()) {
                let order = magnitude_order(p.value.data(), p.mask.data());
                let k = libm::floor(fraction * order.len() as f64) as usize;
                for &i in &order[..k] {
                    prune_entry(p, i);
                }
                total += k;
            }
            Ok(total)
        }
        Scope::Global => {
            let survivors: usize = net.params().iter().filter(|p| p.prunable()).map(|p| p.surviving()).sum();
            let k = libm::floor(fraction * survivors as f64) as usize;
            prune_globally(net, k);
            Ok(k)
        }
    }
}

fn prune_globally(net: &mut Network, k: usize) {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in net.params().iter().enumerate().filter(|(_, p)| p.prunable()) {
        for (i, (v, m)) in p.value.data().iter().zip(p.mask.data()).enumerate() {
            if *m != 0.0 {
                all.push((libm::fabs(*v), pi, i));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, pi, i) in &all[..k.min(all.len())] {
        prune_entry(&mut net.params_mut()[pi], i);
    }
}

/// Prunes until `floor(target * n)` entries are masked (per layer or
/// globally). Never unprunes.
pub fn prune_to_sparsity(net: &mut Network, target: f64, scope: Scope) -> Result<usize> {
    if !(0.0..=1.0).contains(&target) {
        return Err(domain("target sparsity must lie in [0, 1]"));
    }
    match scope {
        Scope::PerLayer => {
            let mut total = 0;
            for p in net.params_mut().iter_mut().filter(|p| p.prunable()) {
                let n = p.value.len();
                let want = libm::floor(target * n as f64) as usize;
                let have = n - p.surviving();
                let k = want.saturating_sub(have);
                let order = magnitude_order(p.value.data(), p.mask.data());
                for &i in &order[..k] {
                    prune_entry(p, i);
                }
                total += k;
            }
            Ok(total)
        }
        Scope::Global => {
            let n = net.prunable_count();
            let have = libm::round(net.sparsity() * n as f64) as usize;
            let k = (libm::floor(target * n as f64) as usize).saturating_sub(have);
            prune_globally(net, k);
            Ok(k)
        }
    }
}

/// Survivor count after `steps` geometric steps on `n` weights with floor
/// rounding per step.
pub fn geometric_survivors(n: usize, fraction: f64, steps: usize) -> usize {
    (0..steps).fold(n, |alive, _| alive - libm::floor(fraction * alive as f64) as usize)
}

/// How the compressed network is fine-tuned after each structural change.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTune {
    /// Base schedule; it is rescaled to the plan's epochs per step.
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub scheme: Scheme,
    pub weighting: WeightingParams,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub step: usize,
    pub sparsity: f64,
    pub loss: f64,
    pub terms: TermValues,
    pub max_simplex_error: f64,
    pub min_weight: f64,
    pub eval_accuracy: Option<f64>,
    pub cie_count: Option<usize>,
}

fn step_log(
    step: usize,
    net: &Network,
    epochs: &[crate::train::EpochLog],
    eval: Option<(&Split, &[usize])>,
) -> Result<StepLog> {
    let last = epochs.last();
    let (eval_accuracy, cie_count) = match eval {
        Some((split, ref_pred)) => {
            let pred = predict_classes(net, &split.inputs)?;
            let correct = pred.iter().zip(&split.labels).filter(|(p, y)| p == y).count();
            let cies = pred.iter().zip(ref_pred).filter(|(a, b)| a != b).count();
            (Some(correct as f64 / split.labels.len() as f64), Some(cies))
        }
        None => (None, None),
    };
    Ok(StepLog {
        step,
        sparsity: net.sparsity(),
        loss: last.map_or(0.0, |l| l.loss),
        terms: last.map_or(TermValues::default(), |l| l.terms),
        max_simplex_error: epochs.iter().map(|l| l.max_simplex_error).fold(0.0, f64::max),
        min_weight: epochs.iter().map(|l| l.min_weight).fold(f64::INFINITY, f64::min),
        eval_accuracy,
        cie_count,
    })
}

/// Iterative magnitude pruning: each step prunes, then fine-tunes the
/// surviving weights from their current values with the configured loss
/// against the frozen reference.
pub fn rewind_compress(
    reference: &Network,
    plan: &CompressionPlan,
    finetune: &FineTune,
    train: &Split,
    eval: Option<&Split>,
    seed: u64,
) -> Result<(Network, Vec<StepLog>)> {
    plan.validate()?;
    let mut student = reference.clone();
    let mut weighting = Weighting::new(finetune.scheme, &finetune.loss.terms, finetune.weighting, seed)?;
    let mut shuffle = SeededRng::new(seed, Stream::Shuffle);
    let schedule = finetune.schedule.rescaled(plan.finetune_epochs_per_step);
    let ref_pred = match eval {
        Some(split) => Some(predict_classes(reference, &split.inputs)?),
        None => None,
    };
    let mut logs = Vec::with_capacity(plan.num_steps);
    for step in 1..=plan.num_steps {
        match plan.step_rule {
            StepRule::Geometric => magnitude_prune(&mut student, plan.per_step_fraction, plan.scope)?,
            StepRule::Additive => {
                let target = (plan.per_step_fraction * step as f64).min(1.0);
                prune_to_sparsity(&mut student, target, plan.scope)?
            }
        };
        let epochs = fit(
            &mut student,
            train,
            &schedule,
            Objective {
                loss: &finetune.loss,
                weighting: &mut weighting,
                teacher: Some(reference),
                group_lambda: 0.0,
            },
            &mut shuffle,
        )?;
        let eval_pair = eval.zip(ref_pred.as_deref());
        logs.push(step_log(step, &student, &epochs, eval_pair)?);
    }
    Ok((student, logs))
}

/// Inserts an identity `GroupAdapter` right after `layer_index`, which must
/// be a Dense or Conv2d layer.
pub fn attach_group_adapter(net: &Network, layer_index: usize) -> Result<Network> {
    let spec = net
        .layers()
        .get(layer_index)
        .ok_or_else(|| config(format!("no layer {layer_index}")))?
        .spec;
    let n = match spec {
        LayerSpec::Dense { out, .. } => out,
        LayerSpec::Conv2d { out_ch, .. } => out_ch,
        other => {
            return Err(config(format!(
                "adapters attach to Dense or Conv2d layers, layer {layer_index} is {}",
                other.name()
            )))
        }
    };
    let (input_shape, mut triples, classes) = net.clone().into_layers();
    let adapter = Parameter::new(alloc::string::String::new(), ParamKind::Adapter, identity(n));
    triples.insert(layer_index + 1, (LayerSpec::GroupAdapter { n }, Some(adapter), None));
    Network::assemble(input_shape, triples, classes)
}

/// Column-wise group norm `sum_j ||A[:, j]||_2` and its subgradient
/// (zero for all-zero columns).
pub fn group_sparsity_regularizer(a: &Tensor) -> (f64, Tensor) {
    let n = a.shape()[0];
    let m = a.shape()[1];
    let mut grad = Tensor::zeros(a.shape());
    let mut total = 0.0;
    for j in 0..m {
        let norm = libm::sqrt((0..n).map(|i| a.data()[i * m + j] * a.data()[i * m + j]).sum::<f64>());
        total += norm;
        if norm > 0.0 {
            for i in 0..n {
                grad.data_mut()[i * m + j] = a.data()[i * m + j] / norm;
            }
        }
    }
    (total, grad)
}

pub fn column_norms(a: &Tensor) -> Vec<f64> {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    (0..m)
        .map(|j| libm::sqrt((0..n).map(|i| a.data()[i * m + j] * a.data()[i * m + j]).sum::<f64>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldSummary {
    /// `(layer index in the folded net, removed output channels)`.
    pub removed: Vec<(usize, Vec<usize>)>,
    pub removed_channels: usize,
}

/// Zeroes weak adapter columns, multiplies every adapter into the layer
/// before it and removes the adapter layers. Output channels whose column
/// was zeroed are dropped together with the matching inputs of the next
/// weighted layer (they are constant zero after folding); on the output
/// layer they are kept so the class count is unchanged.
pub fn fold_adapters(net: &Network, column_threshold: f64) -> Result<(Network, FoldSummary)> {
    let mut current = net.clone();
    let mut summary = FoldSummary::default();
    while let Some(k) = current.layers().iter().position(|l| matches!(l.spec, LayerSpec::GroupAdapter { .. })) {
        let (next, removed) = fold_one(&current, k, column_threshold)?;
        if !removed.is_empty() {
            summary.removed_channels += removed.len();
            summary.removed.push((k - 1, removed));
        }
        current = next;
    }
    Ok((current, summary))
}

fn fold_one(net: &Network, k: usize, column_threshold: f64) -> Result<(Network, Vec<usize>)> {
    if k == 0 {
        return Err(config("adapter must follow a Dense or Conv2d layer"));
    }
    let shapes = net.layer_shapes()?;
    let (input_shape, mut triples, classes) = net.clone().into_layers();
    let (_, a_param, _) = triples.remove(k);
    let mut a = a_param.expect("adapter parameter").value;
    let n = a.shape()[0];

    let norms = column_norms(&a);
    let mean = norms.iter().sum::<f64>() / n as f64;
    let threshold = column_threshold * mean;
    let zeroed: Vec<usize> = (0..n).filter(|&j| norms[j] < threshold).collect();
    if zeroed.len() == n || mean == 0.0 {
        return Err(Error::Degenerate(format!("every column of the adapter after layer {} was pruned", k - 1)));
    }
    for &j in &zeroed {
        for i in 0..n {
            a.data_mut()[i * n + j] = 0.0;
        }
    }

    // W'[j, r] = sum_i A[i, j] W[i, r]; b'[j] = sum_i A[i, j] b[i].
    let (spec, w, b) = &mut triples[k - 1];
    if !matches!(spec, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }) {
        return Err(config("adapter must follow a Dense or Conv2d layer"));
    }
    let w = w.as_mut().expect("weighted layer");
    let b = b.as_mut().expect("weighted layer");
    let row = w.value.len() / n;
    let mut fw = vec![0.0; n * row];
    let mut fmask = vec![0.0; n * row];
    let mut fb = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            let aij = a.data()[i * n + j];
            if aij == 0.0 {
                continue;
            }
            fb[j] += aij * b.value.data()[i];
            for r in 0..row {
                fw[j * row + r] += aij * w.value.data()[i * row + r];
                if w.mask.data()[i * row + r] != 0.0 {
                    fmask[j * row + r] = 1.0;
                }
            }
        }
    }
    let wshape = w.value.shape().to_vec();
    let mut new_w = Parameter::new(w.name.clone(), ParamKind::Weight, Tensor::new(wshape.clone(), fw)?);
    new_w.mask = Tensor::new(wshape, fmask)?;
    new_w.lr_scale = w.lr_scale;
    new_w.apply_mask();
    *w = new_w;
    b.value = Tensor::new(vec![n], fb)?;
    b.grad = Tensor::zeros(&[n]);
    b.velocity = vec![0.0; n];

    // Find the consumer of the folded layer's channels.
    let mut consumer = None;
    let mut block = 1;
    for (idx, (s, _, _)) in triples.iter().enumerate().skip(k) {
        match s {
            LayerSpec::Relu => continue,
            LayerSpec::Flatten => {
                // shapes[] still indexes the net with the adapter in place.
                let before = &shapes[idx + 1];
                block = before[1..].iter().product();
            }
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                consumer = Some(idx);
                break;
            }
            LayerSpec::GroupAdapter { .. } => break,
        }
    }
    let Some(consumer) = consumer.filter(|_| !zeroed.is_empty()) else {
        let folded = Network::assemble(input_shape, triples, classes)?;
        return Ok((folded, Vec::new()));
    };

    let keep: Vec<usize> = (0..n).filter(|j| !zeroed.contains(j)).collect();
    {
        let (spec, w, b) = &mut triples[k - 1];
        let w = w.as_mut().unwrap();
        let b = b.as_mut().unwrap();
        *w = select_rows(w, &keep, row)?;
        *b = select_rows(b, &keep, 1)?;
        *spec = match *spec {
            LayerSpec::Dense { inp, .. } => LayerSpec::Dense { inp, out: keep.len() },
            LayerSpec::Conv2d { in_ch, .. } => LayerSpec::Conv2d { in_ch, out_ch: keep.len() },
            s => s,
        };
    }
    let (spec, w, _) = &mut triples[consumer];
    let w = w.as_mut().unwrap();
    match *spec {
        LayerSpec::Dense { inp, out } => {
            let cols: Vec<usize> = keep.iter().flat_map(|&c| c * block..(c + 1) * block).collect();
            *w = select_cols(w, out, inp, &cols)?;
            *spec = LayerSpec::Dense { inp: cols.len(), out };
        }
        LayerSpec::Conv2d { in_ch, out_ch } => {
            let cols: Vec<usize> = keep.iter().flat_map(|&c| c * 9..(c + 1) * 9).collect();
            *w = select_cols(w, out_ch, in_ch * 9, &cols)?;
            *spec = LayerSpec::Conv2d { in_ch: keep.len(), out_ch };
        }
        _ => unreachable!(),
    }
    let folded = Network::assemble(input_shape, triples, classes)?;
    Ok((folded, zeroed))
}

fn select_rows(p: &Parameter, rows: &[usize], row_len: usize) -> Result<Parameter> {
    let mut shape = p.value.shape().to_vec();
    shape[0] = rows.len();
    let pick = |t: &Tensor| -> Vec<f64> {
        rows.iter().flat_map(|&r| t.data()[r * row_len..(r + 1) * row_len].iter().copied()).collect()
    };
    let mut out = Parameter::new(p.name.clone(), p.kind, Tensor::new(shape.clone(), pick(&p.value))?);
    out.mask = Tensor::new(shape, pick(&p.mask))?;
    out.lr_scale = p.lr_scale;
    Ok(out)
}

fn select_cols(p: &Parameter, rows: usize, row_len: usize, cols: &[usize]) -> Result<Parameter> {
    let mut shape = p.value.shape().to_vec();
    let pick = |t: &Tensor| -> Vec<f64> {
        (0..rows).flat_map(|r| cols.iter().map(move |&c| t.data()[r * row_len + c])).collect()
    };
    if shape.len() == 2 {
        shape[1] = cols.len();
    } else {
        shape[1] = cols.len() / 9;
    }
    let mut out = Parameter::new(p.name.clone(), p.kind, Tensor::new(shape.clone(), pick(&p.value))?);
    out.mask = Tensor::new(shape, pick(&p.mask))?;
    out.lr_scale = p.lr_scale;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSparsityResult {
    pub network: Network,
    pub fold: FoldSummary,
    pub final_column_norms: Vec<Vec<f64>>,
    pub logs: Vec<StepLog>,
}

/// Trains adapters attached after `plan.adapter_layers` with the group
/// regularizer (adapter learning rate scaled by `plan.lr_ratio`), then folds
/// them away.
pub fn group_sparsity_compress(
    reference: &Network,
    plan: &CompressionPlan,
    finetune: &FineTune,
    train: &Split,
    eval: Option<&Split>,
    seed: u64,
) -> Result<GroupSparsityResult> {
    plan.validate()?;
    let mut layers = plan.adapter_layers.clone();
    layers.sort_unstable();
    layers.dedup();
    let mut student = reference.clone();
    for &l in layers.iter().rev() {
        student = attach_group_adapter(&student, l)?;
    }
    for p in student.params_mut().iter_mut().filter(|p| p.kind == ParamKind::Adapter) {
        p.lr_scale = plan.lr_ratio;
    }
    let mut weighting = Weighting::new(finetune.scheme, &finetune.loss.terms, finetune.weighting, seed)?;
    let mut shuffle = SeededRng::new(seed, Stream::Shuffle);
    let epochs = plan.finetune_epochs_per_step * plan.num_steps.max(1);
    let schedule = finetune.schedule.rescaled(epochs);
    let epoch_logs = fit(
        &mut student,
        train,
        &schedule,
        Objective {
            loss: &finetune.loss,
            weighting: &mut weighting,
            teacher: Some(reference),
            group_lambda: plan.lambda,
        },
        &mut shuffle,
    )?;
    let final_column_norms = student
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Adapter)
        .map(|p| column_norms(&p.value))
        .collect();
    let (network, fold) = fold_adapters(&student, plan.column_threshold)?;
    let ref_pred = match eval {
        Some(split) => Some(predict_classes(reference, &split.inputs)?),
        None => None,
    };
    let log = step_log(1, &network, &epoch_logs, eval.zip(ref_pred.as_deref()))?;
    Ok(GroupSparsityResult {
        network,
        fold,
        final_column_norms,
        logs: vec![log],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::predict;
    use crate::models::{build_classifier, build_segmenter};

    fn rng(seed: u64) -> SeededRng {
        SeededRng::new(seed, Stream::Init)
    }

    fn single_layer(values: &[f64]) -> Network {
        let mut net = Network::new(vec![values.len()], vec![LayerSpec::Dense { inp: values.len(), out: 2 }], 2, &mut rng(0)).unwrap();
        let w = &mut net.params_mut()[0].value;
        w.data_mut()[..values.len()].copy_from_slice(values);
        w.data_mut()[values.len()..].iter_mut().for_each(|v| *v = 1.0);
        net
    }

    #[test]
    fn prunes_smallest_magnitudes() {
        for scope in [Scope::PerLayer, Scope::Global] {
            let mut net = Network::new(vec![2], vec![LayerSpec::Dense { inp: 2, out: 2 }], 2, &mut rng(0)).unwrap();
            net.params_mut()[0].value.data_mut().copy_from_slice(&[0.1, -0.5, 0.3, 0.05]);
            assert_eq!(magnitude_prune(&mut net, 0.5, scope).unwrap(), 2);
            assert_eq!(net.params()[0].mask.data(), &[0.0, 1.0, 1.0, 0.0]);
            assert_eq!(net.params()[0].value.data(), &[0.0, -0.5, 0.3, 0.0]);
        }
    }

    #[test]
    fn ties_prune_lowest_indices_first() {
        let mut net = single_layer(&[1.0; 4]);
        magnitude_prune(&mut net, 0.5, Scope::PerLayer).unwrap();
        assert_eq!(net.params()[0].mask.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn successive_steps_compound() {
        let mut net = Network::new(vec![50], vec![LayerSpec::Dense { inp: 50, out: 2 }], 2, &mut rng(3)).unwrap();
        magnitude_prune(&mut net, 0.2, Scope::PerLayer).unwrap();
        assert_eq!(net.params()[0].surviving(), 80);
        magnitude_prune(&mut net, 0.2, Scope::PerLayer).unwrap();
        assert_eq!(net.params()[0].surviving(), 64);
        assert!((net.sparsity() - 0.36).abs() < 1e-12);
        assert_eq!(net.params()[1].surviving(), 2, "biases untouched");
        assert!(magnitude_prune(&mut net, 1.0, Scope::PerLayer).is_err());
        assert!(magnitude_prune(&mut net, 0.0, Scope::PerLayer).is_err());
    }

    #[test]
    fn additive_rule_targets_fixed_increments() {
        let mut net = Network::new(vec![50], vec![LayerSpec::Dense { inp: 50, out: 2 }], 2, &mut rng(3)).unwrap();
        prune_to_sparsity(&mut net, 0.2, Scope::PerLayer).unwrap();
        prune_to_sparsity(&mut net, 0.4, Scope::PerLayer).unwrap();
        assert_eq!(net.params()[0].surviving(), 60);
        prune_to_sparsity(&mut net, 0.1, Scope::Global).unwrap();
        assert_eq!(net.params()[0].surviving(), 60);
    }

    #[test]
    fn survivor_arithmetic() {
        assert_eq!(geometric_survivors(100, 0.2, 2), 64);
        assert_eq!(geometric_survivors(100, 0.2, 0), 100);
    }

    #[test]
    fn identity_adapter_keeps_outputs() {
        let net = build_classifier(3, &[5], 4, &mut rng(1)).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap();
        let with = attach_group_adapter(&net, 0).unwrap();
        assert_eq!(with.layers().len(), 4);
        assert!(predict(&with, &x).unwrap().max_abs_diff(&predict(&net, &x).unwrap()) <= 1e-12);
        assert!(attach_group_adapter(&net, 1).is_err(), "ReLU cannot take an adapter");
    }

    #[test]
    fn doubled_adapter_on_linear_model_doubles_logits() {
        let net = build_classifier(3, &[], 2, &mut rng(1)).unwrap();
        let mut with = attach_group_adapter(&net, 0).unwrap();
        let a = with.params_mut().iter_mut().find(|p| p.kind == ParamKind::Adapter).unwrap();
        a.value.scale(2.0);
        let x = Tensor::row(&[0.3, -1.0, 2.0]);
        let base = predict(&net, &x).unwrap();
        let out = predict(&with, &x).unwrap();
        for (o, b) in out.data().iter().zip(base.data()) {
            assert!((o - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_matches_hand_matrix_product() {
        let mut net = build_classifier(2, &[], 2, &mut rng(1)).unwrap();
        net.params_mut()[0].value.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.25]);
        net.params_mut()[1].value.data_mut().copy_from_slice(&[0.1, -0.2]);
        let mut with = attach_group_adapter(&net, 0).unwrap();
        let a = [0.3, -0.7, 1.1, 0.4];
        with.params_mut()[2].value.data_mut().copy_from_slice(&a);
        let x = [1.5, -2.0];
        // y = W x + b with W row-major [out, in]; z_j = sum_i y_i A[i, j].
        let y = [0.5 * x[0] - 1.0 * x[1] + 0.1, 2.0 * x[0] + 0.25 * x[1] - 0.2];
        let z = [y[0] * a[0] + y[1] * a[2], y[0] * a[1] + y[1] * a[3]];
        let out = predict(&with, &Tensor::row(&x)).unwrap();
        assert!((out.data()[0] - z[0]).abs() < 1e-12 && (out.data()[1] - z[1]).abs() < 1e-12);
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(group_sparsity_regularizer(&identity(3)).0, 3.0);
        let mut a = Tensor::zeros(&[2, 2]);
        a.data_mut()[0] = 3.0;
        a.data_mut()[2] = 4.0;
        let (v, g) = group_sparsity_regularizer(&a);
        assert_eq!(v, 5.0);
        assert_eq!(g.data(), &[0.6, 0.0, 0.8, 0.0]);
        let (v, g) = group_sparsity_regularizer(&Tensor::zeros(&[3, 3]));
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|x| *x == 0.0));
    }

    fn random_adapter(net: &Network, layer: usize, seed: u64) -> Network {
        let mut with = attach_group_adapter(net, layer).unwrap();
        let mut r = SeededRng::new(seed, Stream::Test);
        let a = with.params_mut().iter_mut().find(|p| p.kind == ParamKind::Adapter).unwrap();
        a.value.data_mut().iter_mut().for_each(|v| *v = r.normal());
        with
    }

    #[test]
    fn zero_threshold_fold_is_exact() {
        let net = build_classifier(3, &[6, 5], 4, &mut rng(2)).unwrap();
        let with = random_adapter(&net, 2, 9);
        let (folded, summary) = fold_adapters(&with, 0.0).unwrap();
        assert_eq!(summary.removed_channels, 0);
        assert_eq!(folded.specs(), net.specs());
        let x = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
        assert!(predict(&folded, &x).unwrap().max_abs_diff(&predict(&with, &x).unwrap()) < 1e-9);
    }

    #[test]
    fn zeroed_column_drops_one_channel() {
        let net = build_classifier(3, &[6], 4, &mut rng(2)).unwrap();
        let mut with = random_adapter(&net, 0, 4);
        let a = with.params_mut().iter_mut().find(|p| p.kind == ParamKind::Adapter).unwrap();
        for i in 0..6 {
            a.value.data_mut()[i * 6 + 2] = 0.0;
        }
        let (folded, summary) = fold_adapters(&with, 1e-2).unwrap();
        assert_eq!(summary.removed_channels, 1);
        assert_eq!(summary.removed, vec![(0, vec![2])]);
        assert_eq!(folded.specs()[0], LayerSpec::Dense { inp: 3, out: 5 });
        assert_eq!(folded.specs()[2], LayerSpec::Dense { inp: 5, out: 4 });
        let x = Tensor::new(vec![2, 3], vec![0.2, 0.4, -0.6, 1.0, -1.0, 0.5]).unwrap();
        assert!(predict(&folded, &x).unwrap().max_abs_diff(&predict(&with, &x).unwrap()) < 1e-9);
    }

    #[test]
    fn conv_adapter_fold_drops_channels() {
        let net = build_segmenter(1, &[4, 3], 2, 8, 8, &mut rng(5)).unwrap();
        let mut with = random_adapter(&net, 0, 6);
        let a = with.params_mut().iter_mut().find(|p| p.kind == ParamKind::Adapter).unwrap();
        for i in 0..4 {
            a.value.data_mut()[i * 4 + 1] = 0.0;
        }
        let (folded, summary) = fold_adapters(&with, 1e-2).unwrap();
        assert_eq!(summary.removed_channels, 1);
        assert_eq!(folded.specs()[2], LayerSpec::Conv2d { in_ch: 3, out_ch: 3 });
        let mut r = SeededRng::new(1, Stream::Test);
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| r.normal()).collect()).unwrap();
        assert!(predict(&folded, &x).unwrap().max_abs_diff(&predict(&with, &x).unwrap()) < 1e-9);
    }

    #[test]
    fn all_columns_pruned_is_degenerate() {
        let net = build_classifier(3, &[4], 2, &mut rng(2)).unwrap();
        let mut with = attach_group_adapter(&net, 0).unwrap();
        let a = with.params_mut().iter_mut().find(|p| p.kind == ParamKind::Adapter).unwrap();
        a.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(fold_adapters(&with, 1e-2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn output_layer_keeps_its_classes() {
        let net = build_classifier(3, &[4], 3, &mut rng(2)).unwrap();
        let mut with = random_adapter(&net, 2, 1);
        let a = with.params_mut().iter_mut().find(|p| p.kind == ParamKind::Adapter).unwrap();
        for i in 0..3 {
            a.value.data_mut()[i * 3] = 0.0;
        }
        let (folded, summary) = fold_adapters(&with, 1e-2).unwrap();
        assert_eq!(summary.removed_channels, 0);
        assert_eq!(folded.num_classes(), 3);
        assert_eq!(folded.output_shape(), vec![3]);
    }
}
