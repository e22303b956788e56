//! Reference/compressed misalignment metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{backward, forward};
use crate::data::{Split, Task};
use crate::error::{domain, Error, Result};
use crate::models::Network;
use crate::tensor::{ClassLayout, Tensor};
use crate::train::predict_classes;

/// Ground truth plus both models' predictions for one classification unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionRecord {
    pub id: usize,
    pub label: usize,
    pub reference: usize,
    pub compressed: usize,
}

pub fn records(labels: &[usize], reference: &[usize], compressed: &[usize]) -> Vec<PredictionRecord> {
    labels
        .iter()
        .zip(reference)
        .zip(compressed)
        .enumerate()
        .map(|(id, ((&label, &reference), &compressed))| PredictionRecord {
            id,
            label,
            reference,
            compressed,
        })
        .collect()
}

/// Records where the two models disagree; ids ascending.
pub fn count_cies(records: &[PredictionRecord]) -> (usize, Vec<usize>) {
    let mut ids: Vec<usize> = records.iter().filter(|r| r.reference != r.compressed).map(|r| r.id).collect();
    ids.sort_unstable();
    (ids.len(), ids)
}

/// Disagreements where the reference was right.
pub fn count_cie_u(records: &[PredictionRecord]) -> (usize, Vec<usize>) {
    let mut ids: Vec<usize> = records
        .iter()
        .filter(|r| r.reference == r.label && r.compressed != r.reference)
        .map(|r| r.id)
        .collect();
    ids.sort_unstable();
    (ids.len(), ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CipCounts {
    pub count: usize,
    pub u_count: usize,
    pub per_image: Vec<usize>,
    pub per_image_u: Vec<usize>,
}

/// Per-pixel disagreement counts over `images` equally sized label maps.
pub fn count_cips(truth: &[usize], reference: &[usize], compressed: &[usize], images: usize) -> Result<CipCounts> {
    if reference.len() != compressed.len() || truth.len() != reference.len() {
        return Err(domain(format!(
            "pixel maps differ in size: truth {}, reference {}, compressed {}",
            truth.len(),
            reference.len(),
            compressed.len()
        )));
    }
    if images == 0 || reference.len() % images != 0 {
        return Err(domain("pixel count is not a multiple of the image count"));
    }
    let plane = reference.len() / images;
    let mut per_image = vec![0; images];
    let mut per_image_u = vec![0; images];
    for (i, ((y, r), c)) in truth.iter().zip(reference).zip(compressed).enumerate() {
        if r != c {
            per_image[i / plane] += 1;
            if r == y {
                per_image_u[i / plane] += 1;
            }
        }
    }
    Ok(CipCounts {
        count: per_image.iter().sum(),
        u_count: per_image_u.iter().sum(),
        per_image,
        per_image_u,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fairness {
    /// Misclassification rate per class.
    pub error_reference: Vec<f64>,
    pub error_compressed: Vec<f64>,
    pub gap_reference: f64,
    pub gap_compressed: f64,
    /// `acc_ref[i] - acc_comp[i]`; positive means compression hurt class `i`.
    pub class_accuracy_delta: Vec<f64>,
}

fn max_min_gap(errors: &[f64]) -> f64 {
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Class-level error rates and the max-min gap for both models.
pub fn fairness_metrics(records: &[PredictionRecord], classes: usize) -> Result<Fairness> {
    let mut count = vec![0usize; classes];
    let mut wrong_ref = vec![0usize; classes];
    let mut wrong_comp = vec![0usize; classes];
    for r in records {
        if r.label >= classes {
            return Err(domain(format!("label {} outside [0, {classes})", r.label)));
        }
        count[r.label] += 1;
        wrong_ref[r.label] += (r.reference != r.label) as usize;
        wrong_comp[r.label] += (r.compressed != r.label) as usize;
    }
    if let Some(missing) = count.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let rate = |w: &[usize]| -> Vec<f64> { w.iter().zip(&count).map(|(w, n)| *w as f64 / *n as f64).collect() };
    let error_reference = rate(&wrong_ref);
    let error_compressed = rate(&wrong_comp);
    let class_accuracy_delta = error_reference
        .iter()
        .zip(&error_compressed)
        .map(|(er, ec)| (1.0 - er) - (1.0 - ec))
        .collect();
    Ok(Fairness {
        gap_reference: max_min_gap(&error_reference),
        gap_compressed: max_min_gap(&error_compressed),
        error_reference,
        error_compressed,
        class_accuracy_delta,
    })
}

/// Which logit a saliency map explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// The model's own prediction (per pixel for segmentation nets).
    Predicted,
    Class(usize),
}

/// Nonnegative importance per input location, max-normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Input-gradient saliency `|d logit / d input|`, summed over input
/// channels and divided by its maximum.
///
/// For per-pixel nets the explained quantity is the sum over pixels of the
/// chosen channel (the per-pixel argmax channel for [`Target::Predicted`]).
pub fn saliency(net: &Network, input: &Tensor, target: Target) -> Result<AttributionMap> {
    let single = if input.rank() == net.input_shape().len() {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        input.clone().reshape(shape)?
    } else {
        input.clone()
    };
    if single.batch() != 1 {
        return Err(domain("saliency takes a single input"));
    }
    let mut work = net.clone();
    let (logits, mut tape) = forward(&work, &single)?;
    let layout = ClassLayout::of(&logits)?;
    let chosen = match target {
        Target::Predicted => layout.argmax(logits.data()),
        Target::Class(c) if c < layout.classes => vec![c; layout.positions],
        Target::Class(c) => return Err(domain(format!("class {c} outside [0, {})", layout.classes))),
    };
    let mut seed = Tensor::zeros(logits.shape());
    for (pos, &c) in chosen.iter().enumerate() {
        seed.data_mut()[layout.base(pos) + c * layout.stride()] = 1.0;
    }
    let gx = backward(&mut work, &mut tape, &seed)?;

    let in_shape = net.input_shape();
    let (channels, shape) = if in_shape.len() == 3 {
        (in_shape[0], in_shape[1..].to_vec())
    } else {
        (1, in_shape.to_vec())
    };
    let plane: usize = shape.iter().product();
    let mut values = vec![0.0; plane];
    for c in 0..channels {
        for (v, g) in values.iter_mut().zip(&gx.data()[c * plane..(c + 1) * plane]) {
            *v += libm::fabs(*g);
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(AttributionMap { shape, values })
}

/// How two attribution maps are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IouMode {
    /// `sum(min) / sum(max)`.
    #[default]
    SumRatio,
    /// Mean of per-location `min / max` (locations where both are 0 count as 1).
    PixelMean,
}

pub fn soft_iou(a: &[f64], b: &[f64]) -> Result<f64> {
    soft_iou_with(a, b, IouMode::SumRatio)
}

pub fn soft_iou_with(a: &[f64], b: &[f64], mode: IouMode) -> Result<f64> {
    if a.len() != b.len() {
        return Err(domain("attribution maps differ in size"));
    }
    if a.iter().chain(b).any(|v| !(*v >= 0.0)) {
        return Err(domain("attribution maps must be nonnegative"));
    }
    match mode {
        IouMode::SumRatio => {
            let (mut lo, mut hi) = (0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                lo += x.min(*y);
                hi += x.max(*y);
            }
            Ok(if hi == 0.0 { 1.0 } else { lo / hi })
        }
        IouMode::PixelMean => {
            let total: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| if x.max(*y) == 0.0 { 1.0 } else { x.min(*y) / x.max(*y) })
                .sum();
            Ok(total / a.len().max(1) as f64)
        }
    }
}

/// `2|P and T| / (|P| + |T|)` on binary masks; 1 when both are empty.
pub fn dice(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(domain("masks differ in size"));
    }
    if pred.iter().chain(truth).any(|&v| v > 1) {
        return Err(domain("dice needs binary masks"));
    }
    let (mut inter, mut sp, mut st) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p & t) as usize;
        sp += p as usize;
        st += t as usize;
    }
    Ok(if sp + st == 0 { 1.0 } else { 2.0 * inter as f64 / (sp + st) as f64 })
}

/// Foreground (class 1) indicator of a label map.
pub fn foreground(labels: &[usize]) -> Vec<u8> {
    labels.iter().map(|&y| (y == 1) as u8).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOptions {
    /// Number of evaluation inputs used for attribution IoU (`None` = all).
    pub attribution_samples: Option<usize>,
    pub iou_mode: IouMode,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MisalignmentReport {
    pub task: Task,
    pub classes: usize,
    /// Classification units: examples, or pixels for segmentation.
    pub n_records: usize,
    pub n_inputs: usize,
    pub eval_fingerprint: u64,
    pub sparsity_reference: f64,
    pub sparsity_compressed: f64,
    pub correct_reference: usize,
    pub correct_compressed: usize,
    pub accuracy_reference: f64,
    pub accuracy_compressed: f64,
    pub cie_count: usize,
    pub cie_indices: Vec<usize>,
    pub cie_u_count: usize,
    pub cie_u_indices: Vec<usize>,
    /// Disagreements where only the compressed model is right.
    pub cie_fixed_count: usize,
    pub fairness: Fairness,
    pub mean_iou: f64,
    pub ious: Vec<f64>,
    pub dice_reference: Option<f64>,
    pub dice_compressed: Option<f64>,
    pub cip: Option<CipCounts>,
}

impl MisalignmentReport {
    /// `correct_comp == correct_ref - CIE-U + fixed`, the integer form of the
    /// top-1 accuracy identity.
    pub fn accuracy_identity_holds(&self) -> bool {
        self.correct_compressed + self.cie_u_count == self.correct_reference + self.cie_fixed_count
    }
}

/// Order-sensitive hash of an evaluation split, used to refuse comparing
/// reports computed on different data.
pub fn split_fingerprint(split: &Split) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for d in split.inputs.shape() {
        eat(&(*d as u64).to_le_bytes());
    }
    for v in split.inputs.data() {
        eat(&v.to_le_bytes());
    }
    for y in &split.labels {
        eat(&(*y as u64).to_le_bytes());
    }
    h
}

/// Runs both networks over `eval` and assembles every metric.
pub fn build_report(
    reference: &Network,
    compressed: &Network,
    eval: &Split,
    classes: usize,
    options: &ReportOptions,
) -> Result<MisalignmentReport> {
    if reference.input_shape() != compressed.input_shape() || &eval.inputs.shape()[1..] != reference.input_shape() {
        return Err(Error::Shape {
            context: "evaluation inputs".into(),
            expected: reference.input_shape().to_vec(),
            got: eval.inputs.shape()[1..].to_vec(),
        });
    }
    let ref_pred = predict_classes(reference, &eval.inputs)?;
    let comp_pred = predict_classes(compressed, &eval.inputs)?;
    if ref_pred.len() != eval.labels.len() {
        return Err(domain("prediction count does not match label count"));
    }
    let recs = records(&eval.labels, &ref_pred, &comp_pred);
    let (cie_count, cie_indices) = count_cies(&recs);
    let (cie_u_count, cie_u_indices) = count_cie_u(&recs);
    let cie_fixed_count = recs
        .iter()
        .filter(|r| r.reference != r.label && r.compressed == r.label)
        .count();
    let correct_reference = recs.iter().filter(|r| r.reference == r.label).count();
    let correct_compressed = recs.iter().filter(|r| r.compressed == r.label).count();
    let fairness = fairness_metrics(&recs, classes)?;

    let segmentation = reference.is_per_pixel();
    let (dice_reference, dice_compressed, cip) = if segmentation {
        let truth = foreground(&eval.labels);
        (
            Some(dice(&foreground(&ref_pred), &truth)?),
            Some(dice(&foreground(&comp_pred), &truth)?),
            Some(count_cips(&eval.labels, &ref_pred, &comp_pred, eval.len())?),
        )
    } else {
        (None, None, None)
    };

    let samples = options.attribution_samples.unwrap_or(eval.len()).min(eval.len());
    let mut ious = Vec::with_capacity(samples);
    for i in 0..samples {
        let x = eval.inputs.example(i);
        let a = saliency(reference, &x, Target::Predicted)?;
        let b = saliency(compressed, &x, Target::Predicted)?;
        ious.push(soft_iou_with(&a.values, &b.values, options.iou_mode)?);
    }
    let mean_iou = if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };

    let n = recs.len();
    Ok(MisalignmentReport {
        task: if segmentation { Task::Segmentation } else { Task::Classification },
        classes,
        n_records: n,
        n_inputs: eval.len(),
        eval_fingerprint: split_fingerprint(eval),
        sparsity_reference: reference.sparsity(),
        sparsity_compressed: compressed.sparsity(),
        correct_reference,
        correct_compressed,
        accuracy_reference: correct_reference as f64 / n as f64,
        accuracy_compressed: correct_compressed as f64 / n as f64,
        cie_count,
        cie_indices,
        cie_u_count,
        cie_u_indices,
        cie_fixed_count,
        fairness,
        mean_iou,
        ious,
        dice_reference,
        dice_compressed,
        cip,
    })
}
